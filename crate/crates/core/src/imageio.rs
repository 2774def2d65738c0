//! 8-bit PNG reading and writing: RGB images and indexed label maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth_data::quantize;
use crate::tensor::Array;

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, pixels: vec![0; 3 * width * height] }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// `[3, 1, H, W]` in `[0, 1]`.
pub fn rgb_to_array(image: &RgbImage) -> Array<f32> {
    let plane = image.width * image.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in image.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Array::from_vec(&[3, 1, image.height, image.width], data)
}

/// Item `b` of a `[3, B, H, W]` batch, clamped and quantized.
pub fn array_to_rgb(x: &Array<f32>, b: usize) -> RgbImage {
    let (_, batch, h, w) = x.dims4();
    let plane = h * w;
    let mut out = RgbImage::new(w, h);
    for i in 0..plane {
        out.put(i % w, i / w, [0, 1, 2].map(|c| quantize(x.data()[(c * batch + b) * plane + i])));
    }
    out
}

/// Distinct colors for label visualisation; index 0 is black.
pub fn label_palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            if i == 0 {
                return [0, 0, 0];
            }
            let hue = (i as f64 * 0.618_033_988_749_895).fract();
            let rgb = hsv_to_rgb(hue, 0.75, 0.95);
            rgb.map(|c| (c * 255.0).round() as u8)
        })
        .collect()
}

/// `h`, `s`, `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn encoder(file: &mut BufWriter<File>, width: usize, height: usize) -> png::Encoder<'_, &mut BufWriter<File>> {
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_depth(png::BitDepth::Eight);
    enc
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let mut file = create(path)?;
    let mut enc = encoder(&mut file, image.width, image.height);
    enc.set_color(png::ColorType::Rgb);
    let mut writer = enc.write_header().map_err(|e| Error::png(path, e))?;
    writer.write_image_data(&image.pixels).map_err(|e| Error::png(path, e))?;
    writer.finish().map_err(|e| Error::png(path, e))
}

/// Label map with values `0..palette.len()` as a paletted PNG.
pub fn write_indexed(path: &Path, width: usize, height: usize, labels: &[u8], palette: &[[u8; 3]]) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::Shape(format!("{} labels for a {width}x{height} map", labels.len())));
    }
    if palette.is_empty() || palette.len() > 256 || labels.iter().any(|&l| l as usize >= palette.len()) {
        return Err(Error::Shape(format!("labels exceed the {}-entry palette", palette.len())));
    }
    let mut file = create(path)?;
    let mut enc = encoder(&mut file, width, height);
    enc.set_color(png::ColorType::Indexed);
    enc.set_palette(palette.iter().flatten().copied().collect::<Vec<u8>>());
    let mut writer = enc.write_header().map_err(|e| Error::png(path, e))?;
    writer.write_image_data(labels).map_err(|e| Error::png(path, e))?;
    writer.finish().map_err(|e| Error::png(path, e))
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::png(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::png(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::png(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Reads RGB, RGBA (alpha dropped) or grayscale PNGs as RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let (info, buf) = decode(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::png(path, "expected a color image, found a paletted one")),
    };
    Ok(RgbImage { width: w, height: h, pixels })
}

/// Reads class ids from a paletted or 8-bit grayscale PNG.
pub fn read_labels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (info, buf) = decode(path)?;
    match info.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => Ok((info.width as usize, info.height as usize, buf)),
        other => Err(Error::png(path, format!("expected a label map, found {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_and_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(3, 2);
        img.put(2, 1, [10, 200, 30]);
        img.put(0, 0, [255, 0, 1]);
        let p = dir.path().join("a.png");
        write_rgb(&p, &img).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), img);
        let labels = vec![0, 1, 2, 3, 0, 1];
        let q = dir.path().join("a.mask.png");
        write_indexed(&q, 3, 2, &labels, &label_palette(4)).unwrap();
        assert_eq!(read_labels(&q).unwrap(), (3, 2, labels));
        assert!(write_indexed(&q, 3, 2, &[0, 1, 2, 4, 0, 0], &label_palette(4)).is_err());
    }

    #[test]
    fn array_conversion_round_trips() {
        let mut img = RgbImage::new(4, 2);
        img.put(3, 1, [9, 128, 255]);
        let x = rgb_to_array(&img);
        assert_eq!(x.shape(), &[3, 1, 2, 4]);
        assert_eq!(array_to_rgb(&x, 0), img);
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(0.5, 0.0, 0.5), [0.5, 0.5, 0.5]);
    }
}
