use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CELL;
use crate::error::{Error, Result};
use crate::rng;

/// Side of the square sub-grid strokes are drawn on.
const GRID: f64 = 12.0;
/// Offset of the sub-grid inside the cell.
const MARGIN: f64 = (CELL as f64 - GRID) / 2.0;
const MAX_RETRIES: u64 = 100;
/// Minimum pairwise Hamming distance, as a fraction of cell pixels.
const MIN_DISTANCE_FRACTION: f64 = 0.05;

/// The inputs that fully determine an [`Alphabet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphabetRecipe {
    pub master_seed: u64,
    pub glyph_count: usize,
    pub stroke_budget: (u32, u32),
}

impl AlphabetRecipe {
    pub fn build(&self) -> Result<Alphabet> {
        make_alphabet(self.master_seed, self.glyph_count, self.stroke_budget)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    pub id: String,
    pub master_seed: u64,
    pub glyph_count: usize,
    pub glyph_seeds: Vec<u64>,
    pub stroke_budget: (u32, u32),
}

impl Alphabet {
    pub fn recipe(&self) -> AlphabetRecipe {
        AlphabetRecipe {
            master_seed: self.master_seed,
            glyph_count: self.glyph_count,
            stroke_budget: self.stroke_budget,
        }
    }

    /// Canonical (upright, one pixel wide) bitmap of glyph `i`.
    pub fn canonical_cell(&self, i: usize) -> Vec<u8> {
        glyph_cell(self.glyph_seeds[i], self.stroke_budget, 0.0, 1)
    }
}

/// Derive `glyph_count` mutually distinguishable glyph seeds from `master_seed`.
pub fn make_alphabet(master_seed: u64, glyph_count: usize, stroke_budget: (u32, u32)) -> Result<Alphabet> {
    if glyph_count < 2 {
        return Err(Error::InvalidArgument(format!("glyph_count must be >= 2, got {glyph_count}")));
    }
    if glyph_count > 256 {
        return Err(Error::InvalidArgument(format!("glyph_count must be <= 256, got {glyph_count}")));
    }
    let (lo, hi) = stroke_budget;
    if !(1 <= lo && lo <= hi && hi <= 8) {
        return Err(Error::InvalidArgument(format!(
            "stroke budget ({lo}, {hi}) must satisfy 1 <= min <= max <= 8"
        )));
    }
    let min_distance = (MIN_DISTANCE_FRACTION * (CELL * CELL) as f64).floor() as usize + 1;
    draw_alphabet(master_seed, glyph_count, stroke_budget, min_distance)
}

fn draw_alphabet(
    master_seed: u64,
    glyph_count: usize,
    stroke_budget: (u32, u32),
    min_distance: usize,
) -> Result<Alphabet> {
    let id = format!("a{master_seed:016x}");

    let mut seeds = Vec::with_capacity(glyph_count);
    let mut cells: Vec<Vec<u8>> = Vec::with_capacity(glyph_count);
    for i in 0..glyph_count {
        let accepted = (0..MAX_RETRIES).find_map(|attempt| {
            let seed = rng::derive(master_seed, &[rng::tag("glyph"), i as u64, attempt]);
            let cell = glyph_cell(seed, stroke_budget, 0.0, 1);
            let blank = cell.iter().all(|&p| p == 0);
            let distinct = cells.iter().all(|c| hamming(c, &cell) >= min_distance);
            (!blank && distinct).then_some((seed, cell))
        });
        match accepted {
            Some((seed, cell)) => {
                seeds.push(seed);
                cells.push(cell);
            }
            None => {
                return Err(Error::Indistinguishable {
                    alphabet: id,
                    retries: MAX_RETRIES as usize,
                })
            }
        }
    }
    Ok(Alphabet {
        id,
        master_seed,
        glyph_count,
        glyph_seeds: seeds,
        stroke_budget,
    })
}

pub fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Rasterize one glyph into a `CELL`×`CELL` binary bitmap (row-major).
///
/// Stroke geometry depends only on `seed`; `slant` shears x by
/// `slant * (y - centre)` and `stroke_width` dilates the raster.
pub fn glyph_cell(seed: u64, stroke_budget: (u32, u32), slant: f64, stroke_width: u8) -> Vec<u8> {
    let mut r = rng::stream(seed, &[rng::tag("strokes")]);
    let strokes = r.random_range(stroke_budget.0..=stroke_budget.1);
    let centre = (CELL as f64 - 1.0) / 2.0;

    let mut thin = vec![0u8; CELL * CELL];
    for _ in 0..strokes {
        let points = r.random_range(2..=3usize);
        let pts: Vec<(f64, f64)> = (0..points)
            .map(|_| {
                let x = MARGIN + r.random::<f64>() * (GRID - 1.0);
                let y = MARGIN + r.random::<f64>() * (GRID - 1.0);
                (x + slant * (y - centre), y)
            })
            .collect();
        for seg in pts.windows(2) {
            draw_segment(&mut thin, seg[0], seg[1]);
        }
    }
    dilate(&thin, stroke_width)
}

fn draw_segment(cell: &mut [u8], (x0, y0): (f64, f64), (x1, y1): (f64, f64)) {
    let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    let steps = (len * 4.0).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round();
        let y = (y0 + t * (y1 - y0)).round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < CELL && (y as usize) < CELL {
            cell[y as usize * CELL + x as usize] = 1;
        }
    }
}

fn dilate(cell: &[u8], width: u8) -> Vec<u8> {
    let offsets: &[isize] = match width {
        1 => return cell.to_vec(),
        2 => &[0, 1],
        _ => &[-1, 0, 1],
    };
    let mut out = vec![0u8; CELL * CELL];
    for y in 0..CELL {
        for x in 0..CELL {
            if cell[y * CELL + x] == 0 {
                continue;
            }
            for &dy in offsets {
                for &dx in offsets {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if (0..CELL as isize).contains(&yy) && (0..CELL as isize).contains(&xx) {
                        out[yy as usize * CELL + xx as usize] = 1;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_seeds() {
        let a = make_alphabet(7, 10, (2, 4)).unwrap();
        let b = make_alphabet(7, 10, (2, 4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.glyph_seeds.len(), 10);
    }

    #[test]
    fn rejects_small_glyph_count_and_bad_budget() {
        assert!(make_alphabet(7, 1, (2, 4)).is_err());
        assert!(make_alphabet(7, 10, (0, 4)).is_err());
        assert!(make_alphabet(7, 10, (5, 4)).is_err());
        assert!(make_alphabet(7, 10, (2, 9)).is_err());
    }

    #[test]
    fn different_master_seeds_give_disjoint_seed_lists() {
        let a = make_alphabet(7, 10, (2, 4)).unwrap();
        let b = make_alphabet(8, 10, (2, 4)).unwrap();
        assert_ne!(a.id, b.id);
        for s in &a.glyph_seeds {
            assert!(!b.glyph_seeds.contains(s));
        }
    }

    #[test]
    fn glyphs_are_pairwise_distinguishable() {
        let a = make_alphabet(11, 16, (2, 4)).unwrap();
        let cells: Vec<_> = (0..a.glyph_count).map(|i| a.canonical_cell(i)).collect();
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                assert!(hamming(&cells[i], &cells[j]) > 12, "glyphs {i} and {j} too close");
            }
        }
    }

    #[test]
    fn unmet_distinguishability_fails_after_retries() {
        let err = draw_alphabet(3, 4, (1, 1), CELL * CELL + 1).unwrap_err();
        assert!(matches!(err, Error::Indistinguishable { .. }));
    }

    #[test]
    fn wider_strokes_cover_more_pixels() {
        let seed = 42;
        let count = |w| glyph_cell(seed, (3, 3), 0.0, w).iter().filter(|&&p| p == 1).count();
        assert!(count(2) > count(1));
        assert!(count(3) > count(2));
    }
}
