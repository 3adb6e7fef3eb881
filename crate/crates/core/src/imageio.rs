//! PNG encoding of images (`[3, H, W]` in [-1, 1]) and masks (1-bit grayscale).

use std::io::Cursor;
use std::path::Path;

use gatefill_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::masking::BinaryMask;

pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Snaps an image onto the 8-bit grid so it survives a PNG round trip unchanged.
pub fn quantize<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| T::c(from_u8(to_u8(v.f64()))))
}

pub fn encode_png<T: Real>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Dimension(format!("PNG export needs [3, H, W], got {s:?}"))),
    };
    let plane = h * w;
    let d = img.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push(to_u8(d[c * plane + i].f64()));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer.write_image_data(&rgb).map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<u8>,
}

fn decode(bytes: &[u8]) -> std::result::Result<Decoded, String> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("unexpanded palette".into()),
    };
    Ok(Decoded { width: info.width as usize, height: info.height as usize, channels, samples: buf })
}

/// Decodes an 8-bit PNG (gray or RGB, alpha ignored) into `[3, H, W]`.
pub fn decode_png<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let d = decode(bytes).map_err(Error::Image)?;
    let plane = d.width * d.height;
    let mut data = vec![T::zero(); 3 * plane];
    for i in 0..plane {
        let px = &d.samples[i * d.channels..(i + 1) * d.channels];
        for c in 0..3 {
            let v = if d.channels >= 3 { px[c] } else { px[0] };
            data[c * plane + i] = T::c(from_u8(v));
        }
    }
    Ok(Tensor::from_vec(&[3, d.height, d.width], data)?)
}

pub fn encode_mask_png(m: &BinaryMask) -> Result<Vec<u8>> {
    let (h, w) = (m.height(), m.width());
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if m.is_valid(y, x) {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().map_err(|e| Error::Mask(e.to_string()))?;
        writer.write_image_data(&packed).map_err(|e| Error::Mask(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes a mask PNG. Grayscale of any depth is accepted as long as every pixel is
/// pure black (erased) or pure white (valid).
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Mask(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Mask(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Mask("unexpanded palette".into())),
    };
    let mut bits = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let px = &buf[i * channels..i * channels + channels.min(3)];
        let bit = if px.iter().all(|&v| v == 255) {
            1
        } else if px.iter().all(|&v| v == 0) {
            0
        } else {
            return Err(Error::Mask(format!("pixel {i} is neither black nor white: {px:?}")));
        };
        bits.push(bit);
    }
    BinaryMask::from_bits(h, w, bits)
}

pub fn write_png<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    write_bytes(path, &encode_png(img)?)
}

pub fn read_png<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_png(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    write_bytes(path, &encode_mask_png(m)?)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    decode_mask_png(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Tiles `[N, 3, H, W]` images side by side into one `[3, H, N*W]` strip.
pub fn strip<T: Real>(batch: &Tensor<T>) -> Tensor<T> {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![T::zero(); c * h * n * w];
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * h + y) * n * w + i * w + x] = batch.data()[((i * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, n * w], out).expect("strip dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{sample_mask, MaskBand};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn image_round_trip_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = quantize(&Tensor::<f32>::uniform(&[3, 5, 7], -1.0, 1.0, &mut rng));
        let back: Tensor<f32> = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn mask_round_trip_is_one_bit() {
        let m = sample_mask(MaskBand::DIFFICULT, 32, 4).unwrap();
        let bytes = encode_mask_png(&m).unwrap();
        assert_eq!(decode_mask_png(&bytes).unwrap(), m);
        let odd = BinaryMask::from_bits(3, 11, (0..33).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        assert_eq!(decode_mask_png(&encode_mask_png(&odd).unwrap()).unwrap(), odd);
    }

    #[test]
    fn gray_mask_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::<f32>::uniform(&[3, 4, 4], -0.5, 0.5, &mut rng);
        assert!(matches!(decode_mask_png(&encode_png(&img).unwrap()), Err(Error::Mask(_))));
        assert!(matches!(decode_png::<f32>(b"not a png"), Err(Error::Image(_))));
    }
}
