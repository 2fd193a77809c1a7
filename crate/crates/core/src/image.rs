//! 8-bit RGB images, PNG codec, and conversions to and from tensors.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Full-range BT.601 luma weights for R, G and B.
pub const BT601_LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("image {width}x{height} is empty")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(ImageU8 {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Decodes an 8-bit RGB, grayscale or palette PNG. Grayscale is replicated
/// into three channels. Alpha and 16-bit images are rejected.
pub fn decode_png(bytes: &[u8]) -> Result<ImageU8> {
    let mut cursor = Cursor::new(bytes);
    let decode_err = |cursor: &Cursor<&[u8]>, e: png::DecodingError| Error::Decode {
        offset: cursor.position(),
        message: e.to_string(),
    };

    let mut decoder = png::Decoder::new(&mut cursor);
    decoder.set_transformations(png::Transformations::EXPAND);
    let info_result = decoder.read_info();
    let mut reader = match info_result {
        Ok(r) => r,
        Err(e) => return Err(decode_err(&cursor, e)),
    };
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(Error::Decode {
            offset: 0,
            message: format!("unsupported bit depth {depth:?}"),
        });
    }
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Decode {
                offset: 0,
                message: format!("unsupported color type {other:?}"),
            })
        }
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        offset: 0,
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = match reader.next_frame(&mut buf) {
        Ok(f) => f,
        Err(e) => {
            drop(reader);
            return Err(decode_err(&cursor, e));
        }
    };
    let (w, h) = (frame.width as usize, frame.height as usize);
    let stride = frame.line_size;
    let mut pixels = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w * channels];
        if channels == 3 {
            pixels.extend_from_slice(row);
        } else {
            for &g in row {
                pixels.extend_from_slice(&[g, g, g]);
            }
        }
    }
    ImageU8::new(w, h, pixels)
}

pub fn encode_png(img: &ImageU8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Encode(e.to_string()))?;
        writer
            .write_image_data(&img.pixels)
            .map_err(|e| Error::Encode(e.to_string()))?;
    }
    Ok(out)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<ImageU8> {
    let path = path.as_ref();
    decode_png(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_png(path: impl AsRef<Path>, img: &ImageU8) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// `(3, H, W)` tensor with values `pixel / 255`.
pub fn to_tensor(img: &ImageU8) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0f32; 3 * w * h];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_raw(vec![3, h, w], data).expect("image dims are non-zero")
}

/// Inverse of [`to_tensor`]: clamps to `[0, 1]`, scales by 255 and rounds.
/// Single-channel tensors are replicated to gray RGB.
pub fn from_tensor(t: &Tensor) -> Result<ImageU8> {
    let (c, h, w) = t.dims3()?;
    if c != 3 && c != 1 {
        return Err(Error::shape(format!(
            "image tensors need 1 or 3 channels, got {c}"
        )));
    }
    let plane = h * w;
    let mut pixels = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            let v = t.data()[src * plane + i].clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    ImageU8::new(w, h, pixels)
}

/// Full-range BT.601 luma of a `(3, H, W)` tensor.
pub fn to_luma_bt601(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!(
            "luma conversion needs 3 channels, got {c}"
        )));
    }
    let plane = h * w;
    let (r, g, b) = (t.channel(0), t.channel(1), t.channel(2));
    let data = (0..plane)
        .map(|i| BT601_LUMA[0] * r[i] + BT601_LUMA[1] * g[i] + BT601_LUMA[2] * b[i])
        .collect();
    Tensor::from_raw(vec![1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // 2x2 RGB checkerboard (white on the diagonal), written by Pillow.
    const CHECKER_2X2: &[u8] = &[
        0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44,
        0x52, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0x08, 0x02, 0x00, 0x00, 0x00, 0xfd,
        0xd4, 0x9a, 0x73, 0x00, 0x00, 0x00, 0x12, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0xf8,
        0xff, 0xff, 0x3f, 0x03, 0x04, 0xfc, 0xff, 0xff, 0x1f, 0x00, 0x29, 0xe4, 0x05, 0xfb, 0x5a,
        0xaa, 0x87, 0xae, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
    ];

    // 3x2 8-bit grayscale ramp 0, 50, .., 250, written by Pillow.
    const GRAY_3X2: &[u8] = &[
        0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44,
        0x52, 0x00, 0x00, 0x00, 0x03, 0x00, 0x00, 0x00, 0x02, 0x08, 0x00, 0x00, 0x00, 0x00, 0xb8,
        0x1f, 0x39, 0xc6, 0x00, 0x00, 0x00, 0x10, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0x64,
        0x30, 0x32, 0x62, 0x98, 0x76, 0xe2, 0x17, 0x00, 0x06, 0x82, 0x02, 0xbe, 0x2e, 0x34, 0x5b,
        0x9d, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
    ];

    #[test]
    fn decodes_externally_encoded_files() {
        let img = decode_png(CHECKER_2X2).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(
            img.pixels(),
            &[255, 255, 255, 0, 0, 0, 0, 0, 0, 255, 255, 255]
        );

        let gray = decode_png(GRAY_3X2).unwrap();
        assert_eq!((gray.width(), gray.height()), (3, 2));
        for (i, v) in [0u8, 50, 100, 150, 200, 250].into_iter().enumerate() {
            assert_eq!(gray.pixel(i % 3, i / 3), [v, v, v]);
        }
    }

    #[test]
    fn white_pixel_round_trips() {
        let img = ImageU8::new(1, 1, vec![255, 255, 255]).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let t = to_tensor(&back);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn truncated_stream_is_an_error_with_offset() {
        let img = ImageU8::new(4, 4, vec![17; 48]).unwrap();
        let bytes = encode_png(&img).unwrap();
        let err = decode_png(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }), "{err}");
        let err = decode_png(&CHECKER_2X2[..10]).unwrap_err();
        assert!(err.to_string().contains("byte"), "{err}");
    }

    #[test]
    fn scaling_rule() {
        let img = ImageU8::new(1, 1, vec![128, 0, 255]).unwrap();
        let t = to_tensor(&img);
        assert!((t.data()[0] - 0.50196).abs() < 1e-5);
        assert_eq!(t.data()[1], 0.0);
        assert_eq!(t.data()[2], 1.0);
    }

    #[test]
    fn luma_closed_forms() {
        let white = Tensor::full(vec![3, 1, 1], 1.0).unwrap();
        assert!((to_luma_bt601(&white).unwrap().data()[0] - 1.0).abs() < 1e-6);
        let red = Tensor::new(vec![3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(to_luma_bt601(&red).unwrap().data()[0], 0.299);
        assert!(to_luma_bt601(&Tensor::zeros(vec![2, 1, 1]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn luma_stays_in_unit_range(px in prop::collection::vec(0.0f32..=1.0, 3 * 12)) {
            let t = Tensor::new(vec![3, 3, 4], px).unwrap();
            for &y in to_luma_bt601(&t).unwrap().data() {
                prop_assert!((0.0..=1.0 + 1e-6).contains(&y));
            }
        }

        #[test]
        fn pixels_survive_png_and_tensor_round_trip(
            w in 1usize..9, h in 1usize..9, seed in any::<u64>()
        ) {
            let mut s = seed;
            let pixels = (0..w * h * 3).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 56) as u8
            }).collect();
            let img = ImageU8::new(w, h, pixels).unwrap();
            let decoded = decode_png(&encode_png(&img).unwrap()).unwrap();
            let back = from_tensor(&to_tensor(&decoded)).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
