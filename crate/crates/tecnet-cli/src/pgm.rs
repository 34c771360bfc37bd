//! Binary PGM ("P5") heatmap export. Values are scaled linearly between the
//! per-file min and max, which are recorded in a comment line so the scale
//! can be recovered to within one gray level.

use std::io::Write;
use std::path::Path;

pub fn export_heatmap(
    values: &[f32],
    height: usize,
    width: usize,
    path: &Path,
) -> std::io::Result<()> {
    assert_eq!(values.len(), height * width);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = (hi - lo) as f64;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "P5")?;
    writeln!(f, "# min {lo} max {hi}")?;
    writeln!(f, "{width} {height}")?;
    writeln!(f, "255")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (((v - lo) as f64 / range) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    f.write_all(&bytes)?;
    f.flush()
}
