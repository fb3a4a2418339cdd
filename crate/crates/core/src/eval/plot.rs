//! 2-D stochastic-neighbour projection scatter plots.

use std::collections::BTreeMap;
use std::path::Path;

use bhtsne::tSNE;
use image::{Rgb, RgbImage};
use rand::Rng;

use crate::seed;
use crate::{Error, Result};

const SIZE: u32 = 640;
const MARGIN: f64 = 24.0;
const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Seeded exact t-SNE to two dimensions. Inputs too small or too degenerate
/// for t-SNE keep their seeded random layout.
pub fn project_2d(vectors: &[Vec<f64>], seed_value: u64) -> Vec<[f64; 2]> {
    let n = vectors.len();
    let mut rng = seed::rng(seed_value, &[seed::stream::REDUCER, 2]);
    let init: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1e-2..1e-2)).collect();
    let fallback = || init.chunks(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>();
    let spread = vectors.iter().any(|v| v != &vectors[0]);
    if n < 5 || !spread {
        return fallback();
    }
    let rows: Vec<&[f64]> = vectors.iter().map(|v| v.as_slice()).collect();
    let perplexity = 20.0f64.min((n - 1) as f64 / 3.0);
    let mut tsne: tSNE<f64, &[f64]> = tSNE::new(&rows);
    tsne.perplexity(perplexity).epochs(750).initial_embedding(init.clone()).exact(|a, b| {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    });
    let y = tsne.embedding();
    if y.len() != 2 * n || y.iter().any(|v| !v.is_finite()) {
        return fallback();
    }
    y.chunks(2).map(|c| [c[0], c[1]]).collect()
}

fn dot(img: &mut RgbImage, x: i64, y: i64, colour: [u8; 3]) {
    for dx in -2..=2i64 {
        for dy in -2..=2i64 {
            if dx * dx + dy * dy > 5 {
                continue;
            }
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, Rgb(colour));
            }
        }
    }
}

/// Draws the projection of `vectors` coloured by label and writes it as PNG.
/// Returns the number of points drawn.
pub fn emit_projection_plot(vectors: &[Vec<f64>], labels: &[String], out: &Path, seed_value: u64) -> Result<usize> {
    if vectors.len() < 2 {
        return Err(Error::validation(format!("a projection plot needs at least 2 records, got {}", vectors.len())));
    }
    if labels.len() != vectors.len() {
        return Err(Error::validation("records and labels differ in length"));
    }
    let pts = project_2d(vectors, seed_value);
    let colours: BTreeMap<&String, usize> = {
        let mut ls: Vec<&String> = labels.iter().collect();
        ls.sort();
        ls.dedup();
        ls.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
    };
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pts {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = (0..2).map(|d| (hi[d] - lo[d]).max(1e-12)).collect::<Vec<_>>();
    let usable = SIZE as f64 - 2.0 * MARGIN;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    for (p, l) in pts.iter().zip(labels) {
        let x = MARGIN + (p[0] - lo[0]) / span[0] * usable;
        let y = MARGIN + (hi[1] - p[1]) / span[1] * usable;
        dot(&mut img, x.round() as i64, y.round() as i64, PALETTE[colours[l] % PALETTE.len()]);
    }
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(out).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(pts.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_is_written_for_separated_and_degenerate_input() {
        let dir = tempfile::tempdir().unwrap();
        let v: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 3) as f64 * 10.0, (i as f64) * 0.01]).collect();
        let l: Vec<String> = (0..30).map(|i| format!("t{}", i % 3)).collect();
        let p = dir.path().join("a.png");
        assert_eq!(emit_projection_plot(&v, &l, &p, 1).unwrap(), 30);
        assert!(image::open(&p).is_ok());
        let same = vec![vec![1.0, 2.0]; 6];
        let p2 = dir.path().join("b.png");
        assert_eq!(emit_projection_plot(&same, &l[..6], &p2, 1).unwrap(), 6);
    }

    #[test]
    fn projection_is_seed_deterministic() {
        let v: Vec<Vec<f64>> = (0..12).map(|i| vec![(i % 2) as f64, (i / 2) as f64]).collect();
        assert_eq!(project_2d(&v, 3), project_2d(&v, 3));
    }

    #[test]
    fn one_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_projection_plot(&[vec![0.0]], &["a".into()], &dir.path().join("x.png"), 0).unwrap_err();
        assert!(err.is_validation());
    }
}
