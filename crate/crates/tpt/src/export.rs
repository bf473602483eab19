//! Attention-map export: one CSV and one grayscale PGM per K×T map, for
//! offline inspection of where each query looks.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

fn require_map(map: &Tensor) -> Result<(usize, usize)> {
    if map.shape().len() != 2 {
        return Err(Error::Contract(format!(
            "attention map must be rank 2, got {:?}",
            map.shape()
        )));
    }
    Ok((map.shape()[0], map.shape()[1]))
}

/// Row k = query k (1..K), column t = clip t (1..T), each cell printed
/// with 9 decimal digits.
pub fn write_attention_csv(path: &Path, map: &Tensor) -> Result<()> {
    let (k, t) = require_map(map)?;
    let mut f = fs::File::create(path)?;
    for row in 0..k {
        let mut line = String::with_capacity(t * 12);
        for col in 0..t {
            if col > 0 {
                line.push(',');
            }
            line.push_str(&format!("{:.9}", map.at(row, col)));
        }
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Plain (P2) grayscale image, T wide and K tall, linearly scaled so the
/// map's largest weight is white.
pub fn write_attention_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (k, t) = require_map(map)?;
    let peak = map.data().iter().cloned().fold(0.0_f64, f64::max);
    let mut f = fs::File::create(path)?;
    writeln!(f, "P2")?;
    writeln!(f, "{t} {k}")?;
    writeln!(f, "255")?;
    for row in 0..k {
        let line: Vec<String> = (0..t)
            .map(|col| {
                let v = if peak > 0.0 {
                    (map.at(row, col) / peak * 255.0).round().clamp(0.0, 255.0)
                } else {
                    0.0
                };
                format!("{}", v as u32)
            })
            .collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> Tensor {
        Tensor::new(
            vec![2, 3],
            vec![0.7, 0.2, 0.1, 0.05, 0.15, 0.8],
        )
        .unwrap()
    }

    #[test]
    fn csv_has_nine_decimal_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        write_attention_csv(&path, &sample_map()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "0.700000000,0.200000000,0.100000000");
        assert_eq!(lines[1].split(',').count(), 3);
    }

    #[test]
    fn pgm_is_plain_grayscale_with_white_peak() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        write_attention_pgm(&path, &sample_map()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("3 2"));
        assert_eq!(lines.next(), Some("255"));
        let pixels: Vec<u32> = lines
            .flat_map(|l| l.split_whitespace())
            .map(|p| p.parse().unwrap())
            .collect();
        assert_eq!(pixels.len(), 6);
        assert_eq!(*pixels.iter().max().unwrap(), 255);
        assert!(pixels.iter().all(|&p| p <= 255));
    }

    #[test]
    fn non_matrix_input_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vec = Tensor::new(vec![3], vec![0.1, 0.2, 0.7]).unwrap();
        assert!(write_attention_csv(&dir.path().join("x.csv"), &vec).is_err());
        assert!(write_attention_pgm(&dir.path().join("x.pgm"), &vec).is_err());
    }
}
