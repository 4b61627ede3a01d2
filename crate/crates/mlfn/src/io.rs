//! Image and dataset files: binary PPM and the `manifest.csv` index.

use std::fs;
use std::path::Path;

use mlfn_core::data::{Dataset, FactorSpec, Split, CHANNELS, HEIGHT, WIDTH};
use mlfn_core::tensor::Tensor;
use mlfn_core::Scalar;

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.csv";

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a `[3, H, W]` image with values in `[0, 1]` as binary PPM (P6).
pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let &[3, h, w] = img.shape() else {
        return Err(CliError::Usage(format!("PPM needs a [3, H, W] image, got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    let plane = h * w;
    let d = img.data();
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[c * plane + p].as_f64()));
        }
    }
    Ok(out)
}

/// Decode a P6 file with maxval 255 into `[3, H, W]` values `byte / 255`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> std::result::Result<Tensor<T>, String> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII PPM header")?.to_string());
    }
    if fields[0] != "P6" {
        return Err(format!("expected P6, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM header field `{}`", s));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("unsupported maxval {}", max));
    }
    let pixels = &bytes[pos + 1..];
    if pixels.len() != 3 * w * h {
        return Err(format!("expected {} pixel bytes, found {}", 3 * w * h, pixels.len()));
    }
    let plane = w * h;
    let mut data = vec![T::zero(); 3 * plane];
    for (p, rgb) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = T::from_f64_lossy(rgb[c] as f64 / 255.0);
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| e.to_string())
}

pub fn write_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(CliError::io(path))
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    decode_ppm(&bytes).map_err(|e| CliError::format(path, e))
}

/// Image `i` of an `[N, C, H, W]` batch.
pub fn image<T: Scalar>(images: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    let n = s[1] * s[2] * s[3];
    Ok(Tensor::new(&s[1..], images.data()[i * n..(i + 1) * n].to_vec())?)
}

pub fn image_file_name(id: usize, view: usize, shot: usize) -> String {
    format!("{}_{}_{}.ppm", id, view, shot)
}

/// Write every image plus `manifest.csv` into `dir`.
pub fn export_dataset<T: Scalar>(ds: &Dataset<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["file", "id", "view", "attr_color", "attr_texture", "attr_layout", "attr_carry"])?;
    for i in 0..ds.len() {
        let name = image_file_name(ds.ids[i], ds.views[i], ds.shots[i]);
        write_ppm(&dir.join(&name), &image(&ds.images, i)?)?;
        let a = ds.image_attributes(i);
        w.write_record([name, ds.ids[i].to_string(), ds.views[i].to_string(), a[0].to_string(), a[1].to_string(), a[2].to_string(), a[3].to_string()])?;
    }
    w.flush().map_err(CliError::io(&manifest))?;
    Ok(())
}

/// Read a directory written by [`export_dataset`]. Identities below
/// `train_ids` form the training split.
pub fn import_dataset<T: Scalar>(dir: &Path, spec: FactorSpec, train_ids: usize) -> Result<Dataset<T>> {
    let manifest = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&manifest)?;
    let expected = ["file", "id", "view", "attr_color", "attr_texture", "attr_layout", "attr_carry"];
    if r.headers()?.iter().ne(expected) {
        return Err(CliError::format(&manifest, format!("header must be {}", expected.join(","))));
    }
    let (mut ids, mut views, mut shots, mut data) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut attributes: Vec<Option<[usize; 4]>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| -> Result<usize> {
            rec[k].trim().parse().map_err(|_| CliError::format(&manifest, format!("row {}: `{}` is not an integer", line + 2, &rec[k])))
        };
        let (id, view) = (field(1)?, field(2)?);
        let attrs = [field(3)?, field(4)?, field(5)?, field(6)?];
        if attributes.len() <= id {
            attributes.resize(id + 1, None);
        }
        match attributes[id] {
            Some(a) if a != attrs => {
                return Err(CliError::format(&manifest, format!("identity {} listed with two attribute sets", id)));
            }
            _ => attributes[id] = Some(attrs),
        }
        let shot = rec[0].trim_end_matches(".ppm").rsplit('_').next().and_then(|s| s.parse().ok()).unwrap_or(0);
        let img: Tensor<T> = read_ppm(&dir.join(&rec[0]))?;
        if img.shape() != [CHANNELS, HEIGHT, WIDTH] {
            return Err(CliError::format(dir.join(&rec[0]), format!("image is {:?}", img.shape())));
        }
        data.extend_from_slice(img.data());
        ids.push(id);
        views.push(view);
        shots.push(shot);
    }
    let attributes: Vec<[usize; 4]> = attributes
        .into_iter()
        .enumerate()
        .map(|(id, a)| a.ok_or_else(|| CliError::format(&manifest, format!("identity {} has no images", id))))
        .collect::<Result<_>>()?;
    let splits = (0..attributes.len()).map(|i| if i < train_ids { Split::Train } else { Split::Test }).collect();
    Ok(Dataset { images: Tensor::new(&[ids.len(), CHANNELS, HEIGHT, WIDTH], data)?, ids, views, shots, attributes, splits, spec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlfn_core::data::{generate, DataConfig};

    #[test]
    fn ppm_round_trip_is_exact_on_quantised_values() {
        let data: Vec<f64> = (0..3 * 4 * 2).map(|i| (i * 10 % 256) as f64 / 255.0).collect();
        let img = Tensor::new(&[3, 4, 2], data).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 4\n255\n"));
        let back: Tensor<f64> = decode_ppm(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let mut bytes = b"P6 # comment\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img: Tensor<f32> = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
        assert!(decode_ppm::<f32>(b"P3\n1 1\n255\n000").is_err());
        assert!(decode_ppm::<f32>(b"P6\n2 1\n255\n\x00\x00\x00").is_err());
    }

    #[test]
    fn dataset_export_import_round_trip() {
        let cfg = DataConfig { train_ids: 3, test_ids: 2, imgs_per_view: 2, ..DataConfig::default() };
        let ds: Dataset<f32> = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&ds, dir.path()).unwrap();
        assert!(dir.path().join("4_1_1.ppm").exists());
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.starts_with("file,id,view,attr_color,attr_texture,attr_layout,attr_carry\n"));
        assert_eq!(text.lines().count(), 1 + ds.len());
        let back: Dataset<f32> = import_dataset(dir.path(), cfg.spec, 3).unwrap();
        assert_eq!(back, ds);
    }
}
