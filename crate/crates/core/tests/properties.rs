use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mambaplace::autograd::Tape;
use mambaplace::checkpoint::{Checkpoint, RngState};
use mambaplace::config::RunConfig;
use mambaplace::eval::{localization_recall, EmbeddingIndex, EPSILONS, LOC_KS};
use mambaplace::loss::{contrastive_loss, fine_loss, ContrastiveForm};
use mambaplace::scenegen::{direction, hint_sentence, parse_hint, split_cells, Split, DIRECTIONS, PALETTE};
use mambaplace::ssm::{scan_pairs_parallel, scan_pairs_sequential};
use mambaplace::tensor::Tensor;
use mambaplace::text::TextQuery;
use mambaplace::train::{check_distinct_cells, coarse_batches};

fn unit_rows(raw: &[Vec<f64>]) -> Vec<f64> {
    raw.iter()
        .flat_map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            r.iter().map(move |x| x / n).collect::<Vec<_>>()
        })
        .collect()
}

fn rows(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.1f64..1.0, dim), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parallel_pair_scan_matches_sequential(
        len in 1usize..80,
        width in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..len * width).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..len * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = scan_pairs_sequential(&a, &b, width);
        let p = scan_pairs_parallel(&a, &b, width);
        for (x, y) in s.iter().zip(&p) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn top_k_is_sorted_and_bounded(raw in rows(12, 3), q in prop::collection::vec(-1.0f64..1.0, 3), k in 1usize..20) {
        let idx = EmbeddingIndex::new(3, unit_rows(&raw), (0..12).rev().collect(), vec![[0.0; 2]; 12]).unwrap();
        let r = idx.top_k(&q, k).unwrap();
        prop_assert_eq!(r.hits.len(), k.min(12));
        prop_assert_eq!(r.truncated, k > 12);
        for w in r.hits.windows(2) {
            prop_assert!(w[0].1 < w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn localization_grid_is_monotone(
        pts in prop::collection::vec(prop::collection::vec((0.0f64..40.0, 0.0f64..40.0), 10), 1..12),
    ) {
        let preds: Vec<Vec<[f64; 2]>> = pts.iter().map(|p| p.iter().map(|&(x, y)| [x, y]).collect()).collect();
        let truth = vec![[20.0, 20.0]; preds.len()];
        let g = localization_recall(&preds, &truth, &EPSILONS, &LOC_KS);
        for e in 0..3 {
            for k in 0..3 {
                prop_assert!((0.0..=1.0).contains(&g[e][k]));
                if e > 0 { prop_assert!(g[e][k] >= g[e - 1][k]); }
                if k > 0 { prop_assert!(g[e][k] >= g[e][k - 1]); }
            }
        }
    }

    #[test]
    fn contrastive_loss_is_non_negative(raw in rows(5, 4), tau in 0.05f64..2.0) {
        let tape = Tape::<f64>::new();
        let t = unit_rows(&raw);
        let p = tape.constant(Tensor::new(&[5, 4], t.clone()).unwrap());
        let q = tape.constant(Tensor::new(&[5, 4], t.into_iter().rev().collect()).unwrap());
        for form in [ContrastiveForm::Symmetric, ContrastiveForm::Literal] {
            let l = contrastive_loss(p, q, tau, form).unwrap().value().item();
            prop_assert!(l >= 0.0 && l.is_finite());
        }
    }

    #[test]
    fn fine_loss_is_a_mean_distance(
        pairs in prop::collection::vec(((-20.0f64..20.0, -20.0f64..20.0), (-20.0f64..20.0, -20.0f64..20.0)), 1..8),
    ) {
        let n = pairs.len();
        let pred: Vec<f64> = pairs.iter().flat_map(|((x, y), _)| [*x, *y]).collect();
        let gt: Vec<f64> = pairs.iter().flat_map(|(_, (x, y))| [*x, *y]).collect();
        let oracle = pairs.iter().map(|((a, b), (c, d))| ((a - c).powi(2) + (b - d).powi(2)).sqrt()).sum::<f64>() / n as f64;
        let tape = Tape::<f64>::new();
        let l = fine_loss(
            tape.constant(Tensor::new(&[n, 2], pred).unwrap()),
            tape.constant(Tensor::new(&[n, 2], gt).unwrap()),
            false,
        ).unwrap().value().item();
        prop_assert!((l - oracle).abs() <= 1e-12 * (1.0 + oracle));
    }

    #[test]
    fn coarse_batches_never_repeat_a_cell(
        cells in prop::collection::vec(0u32..9, 2..60),
        size in 2usize..10,
        seed in any::<u64>(),
    ) {
        let qs: Vec<TextQuery> = cells.iter().enumerate().map(|(i, &c)| TextQuery {
            query_id: i as u32,
            cell_id: c,
            target_xy: [0.0, 0.0],
            hints: vec!["h".into()],
        }).collect();
        let refs: Vec<&TextQuery> = qs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in coarse_batches(&refs, size, &mut rng).unwrap() {
            prop_assert!(b.len() >= 2 && b.len() <= size + 1);
            prop_assert!(check_distinct_cells(&b).is_ok());
        }
    }

    #[test]
    fn splits_partition_cells(cells in 3usize..400) {
        let s = split_cells(cells, [0.6, 0.2, 0.2]).unwrap();
        prop_assert_eq!(s.len(), cells);
        for split in Split::ALL {
            prop_assert!(s.contains(&split));
        }
        // contiguous row-major prefix: train, then val, then test
        prop_assert!(s.windows(2).all(|w| w[0] as u8 <= w[1] as u8));
    }

    #[test]
    fn hints_parse_back(dir in 0usize..8, color in 0usize..8, qual in 0usize..3) {
        let q = [Some("just"), Some("well"), None][qual];
        let (cname, _) = PALETTE[color];
        let class = mambaplace::cloud::CLASSES[color];
        let h = hint_sentence(q, DIRECTIONS[dir], cname, class);
        let (pq, pd, pc, pk) = parse_hint(&h).unwrap();
        prop_assert_eq!(pq.as_deref(), q);
        prop_assert_eq!(pd.as_str(), DIRECTIONS[dir]);
        prop_assert_eq!(pc.as_str(), cname);
        prop_assert_eq!(pk.as_str(), class);
    }

    #[test]
    fn direction_of_a_compass_offset(dir in 0usize..8, r in 0.5f64..20.0) {
        let ang = dir as f64 * std::f64::consts::FRAC_PI_4;
        prop_assert_eq!(direction([0.0, 0.0], [r * ang.cos(), r * ang.sin()]), DIRECTIONS[dir]);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        vals in prop::collection::vec(-1e3f32..1e3, 1..40),
        step in any::<u64>(),
        epoch in 0u64..100,
        seed in any::<u64>(),
    ) {
        let n = vals.len();
        let ck = Checkpoint {
            header: "k=v\n".into(),
            params: vec![("w".into(), Tensor::new(&[n], vals.clone()).unwrap())],
            step,
            moments: vec![("m/w".into(), Tensor::new(&[n], vals.clone()).unwrap()), ("v/w".into(), Tensor::zeros(&[n]))],
            epoch,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(seed)),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn canonical_config_parses_to_itself(seed in any::<u64>(), grid in 3usize..20, lr in 1e-5f64..1e-2) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.grid = grid;
        cfg.coarse_lr = lr;
        let back = RunConfig::parse(&cfg.canonical()).unwrap();
        prop_assert_eq!(back.digest(), cfg.digest());
        prop_assert_eq!(back, cfg);
    }
}
