//! Fixed directional trend maps that condition the DirConv branches.
//!
//! Each map decreases linearly from 1 to 0 along one of eight compass
//! directions. Axial maps ramp over one axis, diagonal maps over the
//! normalized Manhattan progress `(i + j) / (H + W - 2)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
    DownRight,
    UpLeft,
    DownLeft,
    UpRight,
}

impl Direction {
    /// Canonical order used everywhere maps are enumerated.
    pub const ALL: [Direction; 8] = [
        Direction::Right,
        Direction::Left,
        Direction::Down,
        Direction::Up,
        Direction::DownRight,
        Direction::UpLeft,
        Direction::DownLeft,
        Direction::UpRight,
    ];

    pub fn complement(self) -> Direction {
        use Direction::*;
        match self {
            Right => Left,
            Left => Right,
            Down => Up,
            Up => Down,
            DownRight => UpLeft,
            UpLeft => DownRight,
            DownLeft => UpRight,
            UpRight => DownLeft,
        }
    }

    pub fn index(self) -> usize {
        Direction::ALL.iter().position(|&d| d == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        use Direction::*;
        match self {
            Right => "right",
            Left => "left",
            Down => "down",
            Up => "up",
            DownRight => "down_right",
            UpLeft => "up_left",
            DownLeft => "down_left",
            UpRight => "up_right",
        }
    }

    /// The four directions whose ramp is computed directly; the other four
    /// are their complements.
    fn is_primary(self) -> bool {
        use Direction::*;
        matches!(self, Right | Down | DownRight | DownLeft)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalMap {
    pub direction: Direction,
    pub height: usize,
    pub width: usize,
    /// Row-major `height * width` values in `[0, 1]`.
    pub values: Vec<f64>,
}

impl DirectionalMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }
}

/// `num / den`, with `0 / 0` read as zero offset.
fn progress(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn make_directional_map(
    direction: Direction,
    height: usize,
    width: usize,
) -> Result<DirectionalMap> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimension(format!(
            "directional map needs positive size, got {height}x{width}"
        )));
    }
    let primary = if direction.is_primary() {
        direction
    } else {
        direction.complement()
    };
    let mut values = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let t = match primary {
                Direction::Right => progress(j, width - 1),
                Direction::Down => progress(i, height - 1),
                Direction::DownRight => progress(i + j, height + width - 2),
                Direction::DownLeft => progress(i + (width - 1 - j), height + width - 2),
                _ => unreachable!(),
            };
            let ramp = 1.0 - t;
            values.push(if direction.is_primary() { ramp } else { 1.0 - ramp });
        }
    }
    Ok(DirectionalMap {
        direction,
        height,
        width,
        values,
    })
}

type MapSet = Arc<Vec<DirectionalMap>>;

/// All eight maps in [`Direction::ALL`] order. Results are cached per size.
pub fn all_directional_maps(height: usize, width: usize) -> Result<MapSet> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), MapSet>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(maps) = cache.lock().unwrap().get(&(height, width)) {
        return Ok(maps.clone());
    }
    let maps: Vec<_> = Direction::ALL
        .iter()
        .map(|&d| make_directional_map(d, height, width))
        .collect::<Result<_>>()?;
    let maps = Arc::new(maps);
    cache
        .lock()
        .unwrap()
        .insert((height, width), maps.clone());
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn right_ramp_3x3() {
        let m = make_directional_map(Direction::Right, 3, 3).unwrap();
        for i in 0..3 {
            assert_eq!(&m.values[i * 3..i * 3 + 3], &[1.0, 0.5, 0.0]);
        }
    }

    #[test]
    fn down_right_2x2() {
        let m = make_directional_map(Direction::DownRight, 2, 2).unwrap();
        assert_eq!(m.values, vec![1.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn left_plus_right_is_ones() {
        let l = make_directional_map(Direction::Left, 3, 3).unwrap();
        let r = make_directional_map(Direction::Right, 3, 3).unwrap();
        assert!(l.values.iter().zip(&r.values).all(|(a, b)| a + b == 1.0));
    }

    #[test]
    fn zero_size_is_rejected() {
        assert!(matches!(
            make_directional_map(Direction::Up, 0, 4),
            Err(Error::InvalidDimension(_))
        ));
        assert!(all_directional_maps(3, 0).is_err());
    }

    #[test]
    fn eight_maps_in_canonical_order() {
        let maps = all_directional_maps(8, 8).unwrap();
        assert_eq!(maps.len(), 8);
        for (m, d) in maps.iter().zip(Direction::ALL) {
            assert_eq!(m.direction, d);
            assert_eq!((m.height, m.width, m.values.len()), (8, 8, 64));
        }
    }

    #[test]
    fn single_pixel_maps_are_finite_constants() {
        for m in all_directional_maps(1, 1).unwrap().iter() {
            assert!(m.values[0] == 1.0 || m.values[0] == 0.0);
        }
        let right = make_directional_map(Direction::Right, 1, 1).unwrap();
        assert_eq!(right.values, vec![1.0]);
    }

    #[test]
    fn complements_are_distinct_involutions() {
        for d in Direction::ALL {
            assert_ne!(d, d.complement());
            assert_eq!(d.complement().complement(), d);
        }
    }

    #[test]
    fn diagonal_down_left_corners() {
        let m = make_directional_map(Direction::DownLeft, 3, 4).unwrap();
        // peaks at the top-right corner, vanishes at the bottom-left corner
        assert_eq!(m.get(0, 3), 1.0);
        assert_eq!(m.get(2, 0), 0.0);
    }

    proptest! {
        #[test]
        fn complement_pairs_sum_to_one(h in 1usize..20, w in 1usize..20) {
            let maps = all_directional_maps(h, w).unwrap();
            for d in Direction::ALL {
                let a = &maps[d.index()];
                let b = &maps[d.complement().index()];
                for (x, y) in a.values.iter().zip(&b.values) {
                    prop_assert_eq!(x + y, 1.0);
                }
            }
        }

        #[test]
        fn range_and_monotonicity(h in 2usize..16, w in 2usize..16) {
            for d in Direction::ALL {
                let m = make_directional_map(d, h, w).unwrap();
                let min = m.values.iter().copied().fold(f64::INFINITY, f64::min);
                let max = m.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(min, 0.0);
                prop_assert_eq!(max, 1.0);
                let (di, dj): (isize, isize) = match d {
                    Direction::Right => (0, 1),
                    Direction::Left => (0, -1),
                    Direction::Down => (1, 0),
                    Direction::Up => (-1, 0),
                    Direction::DownRight => (1, 1),
                    Direction::UpLeft => (-1, -1),
                    Direction::DownLeft => (1, -1),
                    Direction::UpRight => (-1, 1),
                };
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        let (ni, nj) = (i + di, j + dj);
                        if ni >= 0 && nj >= 0 && ni < h as isize && nj < w as isize {
                            prop_assert!(
                                m.get(ni as usize, nj as usize) <= m.get(i as usize, j as usize)
                            );
                        }
                    }
                }
            }
        }

        #[test]
        fn transposition_symmetries(h in 1usize..12, w in 1usize..12) {
            let right = make_directional_map(Direction::Right, h, w).unwrap();
            let down = make_directional_map(Direction::Down, w, h).unwrap();
            for i in 0..h {
                for j in 0..w {
                    prop_assert_eq!(right.get(i, j), down.get(j, i));
                }
            }
            let dr = make_directional_map(Direction::DownRight, h, h).unwrap();
            for i in 0..h {
                for j in 0..h {
                    prop_assert_eq!(dr.get(i, j), dr.get(j, i));
                }
            }
        }

        #[test]
        fn repeated_calls_are_identical(h in 1usize..10, w in 1usize..10) {
            let a = make_directional_map(Direction::UpRight, h, w).unwrap();
            let b = make_directional_map(Direction::UpRight, h, w).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
