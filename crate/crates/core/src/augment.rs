//! Symmetries of the square cell applied to a (submap, query) pair.
//!
//! The eight maps below fix the cell center, permute the eight compass
//! sectors among themselves and only negate or swap coordinates, so a
//! transformed pair is bit-exact and its hints stay true.

use rand::Rng;

use crate::cloud::{ObjectInstance, Submap};
use crate::error::{Error, Result};
use crate::scenegen::{direction, hint_sentence, parse_hint, DIRECTIONS};
use crate::text::TextQuery;

/// One element of the dihedral group of the square; `0` is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral(pub u8);

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral(0),
        Dihedral(1),
        Dihedral(2),
        Dihedral(3),
        Dihedral(4),
        Dihedral(5),
        Dihedral(6),
        Dihedral(7),
    ];

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Dihedral(rng.random_range(0..8))
    }

    /// Rotations by 0°, 90°, 180°, 270°, then the same after mirroring x.
    pub fn apply(self, [x, y]: [f64; 2]) -> [f64; 2] {
        match self.0 {
            0 => [x, y],
            1 => [-y, x],
            2 => [-x, -y],
            3 => [y, -x],
            4 => [-x, y],
            5 => [-y, -x],
            6 => [x, -y],
            7 => [y, x],
            _ => unreachable!("dihedral index < 8"),
        }
    }

    fn apply3(self, p: [f64; 3]) -> [f64; 3] {
        let [x, y] = self.apply([p[0], p[1]]);
        [x, y, p[2]]
    }

    pub fn direction(self, dir: &str) -> Result<&'static str> {
        let i = DIRECTIONS
            .iter()
            .position(|d| *d == dir)
            .ok_or_else(|| Error::Precondition(format!("unknown direction {dir:?}")))?;
        let ang = i as f64 * std::f64::consts::FRAC_PI_4;
        Ok(direction([0.0, 0.0], self.apply([ang.cos(), ang.sin()])))
    }

    /// Cell-local geometry transformed about the origin; ids and order kept.
    pub fn submap(self, s: &Submap) -> Submap {
        Submap {
            cell_id: s.cell_id,
            center_xy: s.center_xy,
            instances: s
                .instances
                .iter()
                .map(|i| ObjectInstance {
                    instance_id: i.instance_id,
                    class_label: i.class_label.clone(),
                    color_rgb: i.color_rgb,
                    centroid: self.apply3(i.centroid),
                    points: i.points.iter().map(|&p| self.apply3(p)).collect(),
                })
                .collect(),
        }
    }

    /// Target moved about `center`; each hint's direction remapped.
    pub fn query(self, q: &TextQuery, center: [f64; 2]) -> Result<TextQuery> {
        let local = self.apply([q.target_xy[0] - center[0], q.target_xy[1] - center[1]]);
        let hints = q
            .hints
            .iter()
            .map(|h| {
                let (qual, dir, color, class) =
                    parse_hint(h).ok_or_else(|| Error::Precondition(format!("hint is not a template sentence: {h:?}")))?;
                Ok(hint_sentence(qual.as_deref(), self.direction(&dir)?, &color, &class))
            })
            .collect::<Result<_>>()?;
        Ok(TextQuery {
            query_id: q.query_id,
            cell_id: q.cell_id,
            target_xy: [center[0] + local[0], center[1] + local[1]],
            hints,
        })
    }
}

/// Applies one freshly drawn map to each `(query, submap)` pair; when `on`
/// is false the pairs are copied and `rng` is left untouched.
pub fn augment_pairs<R: Rng + ?Sized>(
    queries: &[&TextQuery],
    submaps: &[&Submap],
    on: bool,
    rng: &mut R,
) -> Result<(Vec<TextQuery>, Vec<Submap>)> {
    let mut qs = Vec::with_capacity(queries.len());
    let mut ss = Vec::with_capacity(submaps.len());
    for (q, s) in queries.iter().zip(submaps) {
        let d = if on { Dihedral::sample(rng) } else { Dihedral(0) };
        qs.push(d.query(q, s.center_xy)?);
        ss.push(d.submap(s));
    }
    Ok((qs, ss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_world, hint_consistent, WorldConfig};

    #[test]
    fn maps_form_a_group_of_eight_distinct_elements() {
        let p = [1.0, 2.0];
        let images: Vec<[f64; 2]> = Dihedral::ALL.iter().map(|d| d.apply(p)).collect();
        for (i, a) in images.iter().enumerate() {
            assert!(images[i + 1..].iter().all(|b| b != a));
        }
        assert_eq!(Dihedral(1).apply(Dihedral(3).apply(p)), p);
        for d in 4..8 {
            assert_eq!(Dihedral(d).apply(Dihedral(d).apply(p)), p);
        }
    }

    #[test]
    fn quarter_turn_moves_east_to_north() {
        assert_eq!(Dihedral(1).direction("east").unwrap(), "north");
        assert_eq!(Dihedral(1).direction("north-west").unwrap(), "south-west");
        assert_eq!(Dihedral(4).direction("north-east").unwrap(), "north-west");
        assert_eq!(Dihedral(7).direction("north").unwrap(), "east");
    }

    #[test]
    fn transformed_hints_stay_consistent() {
        let cfg = WorldConfig {
            grid: 4,
            queries_per_cell: 3,
            ..WorldConfig::default()
        };
        let ds = generate_world(&cfg).unwrap();
        for q in &ds.queries {
            let s = ds.submap(q.cell_id).unwrap();
            for d in Dihedral::ALL {
                let (ts, tq) = (d.submap(s), d.query(q, s.center_xy).unwrap());
                for h in &tq.hints {
                    assert!(hint_consistent(&ts, &tq, h), "{d:?} {h}");
                }
            }
        }
    }

    #[test]
    fn identity_is_exact() {
        let ds = generate_world(&WorldConfig {
            grid: 3,
            ..WorldConfig::default()
        })
        .unwrap();
        let q = &ds.queries[0];
        let s = ds.submap(q.cell_id).unwrap();
        assert_eq!(&Dihedral(0).submap(s), s);
        assert_eq!(&Dihedral(0).query(q, s.center_xy).unwrap(), q);
    }
}
