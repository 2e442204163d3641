//! Plain-text portable graymap (P2) export for eyeballing grids.

use crate::error::{Error, Result};
use crate::numeric::Tensor;

fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Render an `[H,W]` (or `[1,H,W]`) grid with values in `[0,1]` as P2 text.
///
/// Levels are `floor(255·v + 0.5)`, i.e. round half up.
pub fn to_pgm(grid: &Tensor) -> Result<String> {
    let (h, w) = match grid.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::dim("grid", format!("expected [H,W], got {s:?}"))),
    };
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in grid.data().chunks_exact(w) {
        let line: Vec<String> = row.iter().map(|&v| quantize(v).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Parse P2 text back into an `[H,W]` grid of levels divided by the max value.
pub fn parse_pgm(text: &str) -> Result<Tensor> {
    let bad = |d: &str| Error::Format {
        path: "<pgm>".into(),
        detail: d.to_string(),
    };
    let mut tok = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tok.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut num = || -> Result<usize> {
        tok.next()
            .ok_or_else(|| bad("unexpected end of data"))?
            .parse()
            .map_err(|_| bad("non-integer token"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max == 0 {
        return Err(bad("zero max value"));
    }
    let data = (0..w * h).map(|_| num().map(|v| v as f64 / max as f64)).collect::<Result<Vec<_>>>()?;
    Tensor::new(&[h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128); // 127.5 rounds up
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(1.49 / 255.0), 1);
    }

    #[test]
    fn header_and_layout() {
        let g = Tensor::new(&[2, 3], vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.25]).unwrap();
        let s = to_pgm(&g).unwrap();
        assert_eq!(s, "P2\n3 2\n255\n0 128 255\n255 0 64\n");
        let back = parse_pgm(&s).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert!(back.max_abs_diff(&g) <= 0.5 / 255.0 + 1e-12);
    }
}
