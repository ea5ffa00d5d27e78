//! On-disk formats: GCR1 rasters, GCMP model params, predictions CSV and
//! PNG renderings.
//!
//! GCR1: `b"GCR1"`, u32 rows, u32 cols, u32 channels (1 or 3), then
//! little-endian f32 planes in row-major order, R then G then B.
//!
//! GCMP: `b"GCMP"`, u32 version, u32 rows, u32 cols, little-endian f64
//! weights in row-major order, then one f64 bias per row.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::ensemble::PredictionSet;
use crate::error::{GcmsError, Result};
use crate::model::ModelParams;
use crate::raster::{PositionalChannels, RasterGrid};
use crate::NUM_LABELS;

pub const RASTER_MAGIC: &[u8; 4] = b"GCR1";
pub const PARAMS_MAGIC: &[u8; 4] = b"GCMP";
pub const PARAMS_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    kind: &'static str,
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(GcmsError::format(
                self.kind,
                format!(
                    "truncated: needed {n} more bytes, found {}",
                    self.bytes.len()
                ),
            ));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(GcmsError::format(
                self.kind,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(GcmsError::format(
                self.kind,
                format!("{} trailing bytes", self.bytes.len()),
            ))
        }
    }
}

/// Encodes a raster as GCR1. Grids with positional channels write 3 planes.
pub fn encode_raster(grid: &RasterGrid) -> Vec<u8> {
    let (rows, cols) = grid.shape();
    let planes: Vec<&Array2<f64>> = match &grid.channels {
        Some(ch) => vec![&grid.values, &ch.time, &ch.mass],
        None => vec![&grid.values],
    };
    let mut out = Vec::with_capacity(16 + planes.len() * rows * cols * 4);
    out.extend_from_slice(RASTER_MAGIC);
    put_u32(&mut out, rows as u32);
    put_u32(&mut out, cols as u32);
    put_u32(&mut out, planes.len() as u32);
    for plane in planes {
        for &v in plane.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_raster(bytes: &[u8]) -> Result<RasterGrid> {
    let mut cur = Cursor {
        kind: "GCR1 raster",
        bytes,
    };
    cur.expect_magic(RASTER_MAGIC)?;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let channels = cur.u32()? as usize;
    if rows == 0 || cols == 0 || !(channels == 1 || channels == 3) {
        return Err(GcmsError::format(
            "GCR1 raster",
            format!("unsupported shape {rows}x{cols} with {channels} channels"),
        ));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(channels * 4));
    if expected != Some(cur.bytes.len()) {
        return Err(GcmsError::format(
            "GCR1 raster",
            format!(
                "payload is {} bytes, header implies {expected:?}",
                cur.bytes.len()
            ),
        ));
    }
    let mut plane = || -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from(cur.f32()?));
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("sized above"))
    };
    let values = plane()?;
    let extra = if channels == 3 {
        Some(PositionalChannels {
            time: plane()?,
            mass: plane()?,
        })
    } else {
        None
    };
    cur.finish()?;
    let mut grid = RasterGrid::from_values(values);
    grid.config.with_positional_channels = extra.is_some();
    grid.channels = extra;
    Ok(grid)
}

pub fn write_raster(path: impl AsRef<Path>, grid: &RasterGrid) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raster(grid)).map_err(|e| GcmsError::io(path, e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterGrid> {
    let path = path.as_ref();
    decode_raster(&fs::read(path).map_err(|e| GcmsError::io(path, e))?)
}

pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let (rows, cols) = params.weights.dim();
    let mut out = Vec::with_capacity(16 + (rows * cols + rows) * 8);
    out.extend_from_slice(PARAMS_MAGIC);
    put_u32(&mut out, PARAMS_VERSION);
    put_u32(&mut out, rows as u32);
    put_u32(&mut out, cols as u32);
    for &w in params.weights.iter() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for &b in params.bias.iter() {
        out.extend_from_slice(&b.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = Cursor {
        kind: "GCMP params",
        bytes,
    };
    cur.expect_magic(PARAMS_MAGIC)?;
    let version = cur.u32()?;
    if version != PARAMS_VERSION {
        return Err(GcmsError::format(
            "GCMP params",
            format!("unsupported version {version}"),
        ));
    }
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    if rows != NUM_LABELS || cols == 0 {
        return Err(GcmsError::format(
            "GCMP params",
            format!("shape {rows}x{cols}, expected {NUM_LABELS} rows"),
        ));
    }
    if cur.bytes.len() != (rows * cols + rows) * 8 {
        return Err(GcmsError::format(
            "GCMP params",
            format!(
                "payload is {} bytes for a {rows}x{cols} model",
                cur.bytes.len()
            ),
        ));
    }
    let weights = (0..rows * cols)
        .map(|_| cur.f64())
        .collect::<Result<Vec<_>>>()?;
    let bias = (0..rows).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
    cur.finish()?;
    Ok(ModelParams {
        weights: Array2::from_shape_vec((rows, cols), weights).expect("sized above"),
        bias: Array1::from(bias),
    })
}

pub fn write_params(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(params)).map_err(|e| GcmsError::io(path, e))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    decode_params(&fs::read(path).map_err(|e| GcmsError::io(path, e))?)
}

/// Writes `sample_id,<label names...>` then one row per sample, ordered by
/// id, probabilities with 6 decimals.
pub fn write_predictions<W: Write>(
    label_names: &[String],
    preds: &PredictionSet,
    sink: W,
) -> Result<()> {
    if label_names.len() != NUM_LABELS {
        return Err(GcmsError::invalid(format!(
            "{} label names, expected {NUM_LABELS}",
            label_names.len()
        )));
    }
    let mut writer = csv::Writer::from_writer(sink);
    let mut header = vec!["sample_id".to_string()];
    header.extend(label_names.iter().cloned());
    writer.write_record(&header)?;
    for (id, probs) in preds {
        let mut row = vec![id.clone()];
        row.extend(probs.iter().map(|p| format!("{p:.6}")));
        writer.write_record(&row)?;
    }
    writer
        .flush()
        .map_err(|e| GcmsError::io("<predictions sink>", e))?;
    Ok(())
}

/// Reads a predictions CSV, returning its label names and rows.
pub fn read_predictions<R: Read>(source: R, origin: &str) -> Result<(Vec<String>, PredictionSet)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.len() != NUM_LABELS + 1
        || !headers
            .get(0)
            .is_some_and(|h| h.eq_ignore_ascii_case("sample_id"))
    {
        return Err(GcmsError::format(
            "predictions CSV",
            format!("{origin}: header must be sample_id plus {NUM_LABELS} labels"),
        ));
    }
    let names = headers.iter().skip(1).map(str::to_string).collect();
    let mut preds = PredictionSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record.get(0).unwrap_or("").to_string();
        let mut probs = [0.0; NUM_LABELS];
        for (k, p) in probs.iter_mut().enumerate() {
            let raw = record.get(k + 1).unwrap_or("");
            *p = raw
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .ok_or_else(|| GcmsError::Row {
                    origin: origin.to_string(),
                    line,
                    message: format!("probability `{raw}` is not a number in [0, 1]"),
                })?;
        }
        if preds.insert(id.clone(), probs).is_some() {
            return Err(GcmsError::DuplicateId(id));
        }
    }
    Ok((names, preds))
}

pub fn read_predictions_file(path: impl AsRef<Path>) -> Result<(Vec<String>, PredictionSet)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| GcmsError::io(path, e))?;
    read_predictions(file, &path.display().to_string())
}

pub fn to_u8(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// RGB pixels of a raster: R = values, G = time channel, B = mass channel
/// (zero planes when the grid has no channels). By default image row 0 is
/// the last raster row (m/z 255); `mz_zero_top` keeps raster order.
pub fn raster_pixels(grid: &RasterGrid, mz_zero_top: bool) -> Vec<[u8; 3]> {
    let (rows, cols) = grid.shape();
    let mut pixels = Vec::with_capacity(rows * cols);
    for y in 0..rows {
        let m = if mz_zero_top { y } else { rows - 1 - y };
        for c in 0..cols {
            let (g, b) = grid
                .channels
                .as_ref()
                .map_or((0.0, 0.0), |ch| (ch.time[[m, c]], ch.mass[[m, c]]));
            pixels.push([to_u8(grid.values[[m, c]]), to_u8(g), to_u8(b)]);
        }
    }
    pixels
}

/// Encodes an 8-bit RGB PNG of the raster.
pub fn encode_png(grid: &RasterGrid, mz_zero_top: bool) -> Result<Vec<u8>> {
    let (rows, cols) = grid.shape();
    let data: Vec<u8> = raster_pixels(grid, mz_zero_top)
        .into_iter()
        .flatten()
        .collect();
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, cols as u32, rows as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(&data)?;
        writer.finish()?;
    }
    Ok(out)
}

pub fn write_png(path: impl AsRef<Path>, grid: &RasterGrid, mz_zero_top: bool) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(grid, mz_zero_top)?).map_err(|e| GcmsError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::encode_channels;
    use ndarray::array;

    #[test]
    fn raster_header_layout() {
        let grid = encode_channels(RasterGrid::from_values(Array2::zeros((256, 192))));
        let bytes = encode_raster(&grid);
        assert_eq!(&bytes[..4], b"GCR1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 256);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 192);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + 3 * 256 * 192 * 4);
    }

    #[test]
    fn raster_decodes_what_it_encodes() {
        let grid = encode_channels(RasterGrid::from_values(array![[0.5, 0.25], [1.0, 0.0]]));
        let back = decode_raster(&encode_raster(&grid)).unwrap();
        assert_eq!(back.values, grid.values);
        assert_eq!(back.channels, grid.channels);
    }

    #[test]
    fn malformed_rasters_are_rejected() {
        assert!(decode_raster(b"NOPE").is_err());
        let mut bytes = encode_raster(&RasterGrid::from_values(array![[0.5]]));
        bytes.pop();
        assert!(decode_raster(&bytes).is_err());
        bytes[12] = 2;
        assert!(decode_raster(&bytes).is_err());
    }

    #[test]
    fn params_decode_what_they_encode() {
        let mut p = ModelParams::zeros(5);
        p.weights[[3, 4]] = -1.25e-7;
        p.bias[8] = 9f64.ln();
        let bytes = encode_params(&p);
        assert_eq!(&bytes[..4], b"GCMP");
        assert_eq!(bytes.len(), 16 + (9 * 5 + 9) * 8);
        assert_eq!(decode_params(&bytes).unwrap(), p);
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn predictions_csv_uses_six_decimals() {
        let names: Vec<String> = (0..9).map(|k| format!("l{k}")).collect();
        let preds: PredictionSet = [
            ("S2".to_string(), [0.5; 9]),
            ("S1".to_string(), [1.0 / 3.0; 9]),
        ]
        .into_iter()
        .collect();
        let mut buf = Vec::new();
        write_predictions(&names, &preds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sample_id,l0,l1,l2,l3,l4,l5,l6,l7,l8"
        );
        assert!(lines.next().unwrap().starts_with("S1,0.333333,"));
        let (back_names, back) = read_predictions(buf.as_slice(), "mem").unwrap();
        assert_eq!(back_names, names);
        assert_eq!(back["S2"], [0.5; 9]);
    }

    #[test]
    fn red_grid_renders_red() {
        let grid = RasterGrid::from_values(Array2::from_elem((4, 3), 1.0));
        assert!(raster_pixels(&grid, false)
            .iter()
            .all(|p| *p == [255, 0, 0]));
        let a = encode_png(&grid, false).unwrap();
        assert_eq!(a, encode_png(&grid, false).unwrap());
        assert_eq!(&a[1..4], b"PNG");
    }

    #[test]
    fn default_orientation_puts_top_mass_first() {
        let mut values = Array2::zeros((256, 2));
        values[[255, 0]] = 1.0;
        let grid = RasterGrid::from_values(values);
        assert_eq!(raster_pixels(&grid, false)[0], [255, 0, 0]);
        assert_eq!(raster_pixels(&grid, true)[255 * 2], [255, 0, 0]);
    }
}
