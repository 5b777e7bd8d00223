//! Attention export: a CSV of `(x, y, attention)` rows and a plain-text
//! graymap rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use spade_core::mil::SlideBag;

use crate::error::{dim_mismatch, Result};
use crate::io::write_text;

/// Writes `out_path` (CSV) and the same path with a `.pgm` extension.
pub fn export_attention(bag: &SlideBag, attention: &[f64], out_path: &Path) -> Result<(PathBuf, PathBuf)> {
    if attention.len() != bag.coords.len() {
        return Err(dim_mismatch(bag.coords.len(), attention.len(), "attention vs patch coordinates"));
    }
    let mut csv = String::from("x,y,attention\n");
    for ((x, y), a) in bag.coords.iter().zip(attention) {
        writeln!(csv, "{x},{y},{a}").unwrap();
    }
    write_text(out_path, &csv)?;
    let pgm_path = out_path.with_extension("pgm");
    write_text(&pgm_path, &render_pgm(&bag.coords, attention))?;
    Ok((out_path.to_path_buf(), pgm_path))
}

/// Distinct coordinates become grid cells; brightness is attention relative
/// to the maximum. Cells without a patch are black.
pub fn render_pgm(coords: &[(f64, f64)], attention: &[f64]) -> String {
    let index = |values: Vec<f64>| -> BTreeMap<u64, usize> {
        let mut sorted = values;
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        sorted.iter().enumerate().map(|(i, v)| (v.to_bits(), i)).collect()
    };
    let xs = index(coords.iter().map(|c| c.0).collect());
    let ys = index(coords.iter().map(|c| c.1).collect());
    let (w, h) = (xs.len().max(1), ys.len().max(1));
    let max = attention.iter().copied().fold(0.0f64, f64::max);
    let mut pixels = vec![0u8; w * h];
    for (&(x, y), &a) in coords.iter().zip(attention) {
        let level = if max > 0.0 { (255.0 * a / max).round() as u8 } else { 0 };
        let cell = &mut pixels[ys[&y.to_bits()] * w + xs[&x.to_bits()]];
        *cell = (*cell).max(level);
    }
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in pixels.chunks(w) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
