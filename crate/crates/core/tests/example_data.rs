use std::path::Path;

use mambaplace::config::RunConfig;
use mambaplace::scenegen::{generate_world, load_split_files, write_dataset};

fn example_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data-example"))
}

#[test]
fn example_files_load_and_round_trip() {
    let (ds, _) = load_split_files(example_dir()).unwrap();
    assert_eq!(ds.submaps.len(), 9);
    assert_eq!(ds.queries.len(), 9);
    for split in ["train", "val", "test"] {
        let path = example_dir().join(format!("{split}.jsonl"));
        let bytes = std::fs::read(path).unwrap();
        let part = mambaplace::scenegen::read_dataset(bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        write_dataset(&part, &mut again).unwrap();
        assert_eq!(again, bytes, "{split}");
    }
}

#[test]
fn example_files_are_regenerable() {
    let cfg = RunConfig::parse(
        "grid=3\nqueries_per_cell=1\nmin_instances=2\nmax_instances=2\nhints_per_query=2\nmin_points=8\nmax_points=8\n",
    )
    .unwrap();
    let (ds, _) = load_split_files(example_dir()).unwrap();
    assert_eq!(generate_world(&cfg.world()).unwrap(), ds);
}
