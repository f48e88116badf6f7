use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Files written for one exported mask.
#[derive(Clone, Debug)]
pub struct MaskExport {
    pub pgm: PathBuf,
    pub upsampled_pgm: PathBuf,
    pub csv: PathBuf,
}

/// Nearest-neighbour upsampling of an (H,W) or (H,W,1) map by an integer factor.
pub fn upsample_nearest(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = match *mask.shape() {
        [h, w] | [h, w, 1] => (h, w),
        ref s => return Err(Error::shape("upsample_nearest", format!("expected a single-channel map, got {s:?}"))),
    };
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be positive".into()));
    }
    let (uh, uw) = (h * factor, w * factor);
    Ok(Tensor::from_fn(&[uh, uw, 1], |i| {
        let (y, x) = (i / uw, i % uw);
        mask.data()[(y / factor) * w + x / factor]
    }))
}

/// Writes an 8-bit binary PGM, mapping [0,1] linearly onto [0,255].
pub fn write_pgm(map: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match *map.shape() {
        [h, w] | [h, w, 1] => (h, w),
        ref s => return Err(Error::shape("write_pgm", format!("expected a single-channel map, got {s:?}"))),
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_csv(map: &Tensor, w: usize, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for row in map.data().chunks_exact(w) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a mask CSV written by [`export_mask`] back into an (H,W,1) tensor.
pub fn read_mask_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let vals = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::format(path, "ragged mask rows"));
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::new(&[rows, width.unwrap_or(0), 1], data).map_err(|e| Error::format(path, e.to_string()))
}

/// Exports batch item `item` of a (B,H,W,1) mask as `<dir>/<stem>.pgm`,
/// `<stem>_up.pgm` (nearest-neighbour upsampled by `factor`) and `<stem>.csv`.
pub fn export_mask(mask: &Tensor, item: usize, factor: usize, dir: &Path, stem: &str) -> Result<MaskExport> {
    let [b, h, w] = match *mask.shape() {
        [b, h, w, 1] => [b, h, w],
        ref s => return Err(Error::shape("export_mask", format!("expected a (batch, h, w, 1) mask, got {s:?}"))),
    };
    if item >= b {
        return Err(Error::InvalidArgument(format!("batch index {item} out of range for batch of {b}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let single = mask.batch_item(item);
    let export = MaskExport {
        pgm: dir.join(format!("{stem}.pgm")),
        upsampled_pgm: dir.join(format!("{stem}_up.pgm")),
        csv: dir.join(format!("{stem}.csv")),
    };
    write_pgm(&single, &export.pgm)?;
    write_pgm(&upsample_nearest(&single, factor)?, &export.upsampled_pgm)?;
    write_csv(&single, w, &export.csv)?;
    debug_assert_eq!(single.len(), h * w);
    Ok(export)
}

/// File stem encoding branch, epoch and sample id.
pub fn mask_stem(branch: &str, epoch: usize, sample_id: usize) -> String {
    format!("{branch}_e{epoch:03}_s{sample_id:05}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_half_mask_is_mid_gray_and_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Tensor::from_fn(&[2, 3, 4, 1], |i| if i < 12 { 0.5 } else { 0.1 * (i % 7) as f64 + 0.013 });
        let ex = export_mask(&mask, 0, 2, dir.path(), &mask_stem("att0", 3, 17)).unwrap();
        assert!(ex.pgm.ends_with("att0_e003_s00017.pgm"));
        let bytes = std::fs::read(&ex.pgm).unwrap();
        let header = b"P5\n4 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 128));
        let up = std::fs::read(&ex.upsampled_pgm).unwrap();
        assert!(up.starts_with(b"P5\n8 6\n255\n"));

        let ex1 = export_mask(&mask, 1, 1, dir.path(), "second").unwrap();
        let back = read_mask_csv(&ex1.csv).unwrap();
        assert_eq!(back, mask.batch_item(1));
        assert!(export_mask(&mask, 2, 1, dir.path(), "x").is_err());
    }

    #[test]
    fn nearest_upsampling_by_eight() {
        let mask = Tensor::from_fn(&[40, 28, 1], |i| i as f64);
        let up = upsample_nearest(&mask, 8).unwrap();
        assert_eq!(up.shape(), &[320, 224, 1]);
        for (y, x) in [(0, 0), (7, 7), (8, 0), (319, 223), (100, 57)] {
            assert_eq!(up.at(&[y, x, 0]), mask.at(&[y / 8, x / 8, 0]));
        }
    }
}
