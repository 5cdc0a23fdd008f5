use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel mean subtracted after scaling pixels to `[0, 1]`.
pub const PIXEL_MEAN: f64 = 0.5;
/// Per-channel standard deviation divided out after mean subtraction.
pub const PIXEL_STD: f64 = 0.5;

/// 8-bit RGB raster, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("empty image ({width}x{height})")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels)
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

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Nearest-neighbour resize to `side×side`, then `(v/255 − 0.5)/0.5` per
/// channel. Output shape `[side, side, 3]`.
pub fn preprocess_image(img: &RgbImage, side: usize) -> Result<Tensor> {
    if side == 0 {
        return Err(Error::Input("image_side must be positive".into()));
    }
    let mut out = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        let sy = y * img.height / side;
        for x in 0..side {
            let sx = x * img.width / side;
            for c in img.get(sx, sy) {
                out.push((c as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD);
            }
        }
    }
    Tensor::new([side, side, 3], out)
}

fn check_square(op: &'static str, img: &Tensor) -> Result<usize> {
    match img.shape() {
        [h, w, 3] if h == w => Ok(*h),
        s => Err(Error::dim(op, format!("expected [S, S, 3], got {s:?}"))),
    }
}

/// Cuts an `[S, S, 3]` image into non-overlapping `p×p` patches in raster
/// order; each patch is flattened row-major as `(row, col, channel)`.
pub fn patchify(img: &Tensor, p: usize) -> Result<Tensor> {
    let s = check_square("patchify", img)?;
    if p == 0 || s % p != 0 {
        return Err(Error::dim("patchify", format!("patch size {p} does not divide image side {s}")));
    }
    let g = s / p;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..g {
        for px in 0..g {
            for y in 0..p {
                let start = ((py * p + y) * s + px * p) * 3;
                out.extend_from_slice(&src[start..start + p * 3]);
            }
        }
    }
    Tensor::new([g * g, 3 * p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, side: usize, p: usize) -> Result<Tensor> {
    if p == 0 || !side.is_multiple_of(p) {
        return Err(Error::dim("unpatchify", format!("patch size {p} does not divide image side {side}")));
    }
    let g = side / p;
    if patches.shape() != [g * g, 3 * p * p] {
        return Err(Error::dim(
            "unpatchify",
            format!("expected [{}, {}], got {:?}", g * g, 3 * p * p, patches.shape()),
        ));
    }
    let src = patches.data();
    let mut out = vec![0.0; side * side * 3];
    for py in 0..g {
        for px in 0..g {
            let patch = &src[(py * g + px) * 3 * p * p..][..3 * p * p];
            for y in 0..p {
                let start = ((py * p + y) * side + px * p) * 3;
                out[start..start + p * 3].copy_from_slice(&patch[y * p * 3..(y + 1) * p * 3]);
            }
        }
    }
    Tensor::new([side, side, 3], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_grey_maps_to_known_value() {
        let img = RgbImage::filled(5, 7, [128, 128, 128]).unwrap();
        let t = preprocess_image(&img, 4).unwrap();
        let want: f64 = (128.0 / 255.0 - 0.5) / 0.5;
        assert!((want - 0.00392).abs() < 1e-5);
        assert!(t.data().iter().all(|&v| v == want));
    }

    #[test]
    fn identity_resize_keeps_pixels() {
        let pixels: Vec<u8> = (0..32 * 32 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = RgbImage::new(32, 32, pixels.clone()).unwrap();
        let t = preprocess_image(&img, 32).unwrap();
        assert_eq!(t.shape(), &[32, 32, 3]);
        for (v, p) in t.data().iter().zip(&pixels) {
            assert_eq!(*v, (*p as f64 / 255.0 - 0.5) / 0.5);
        }
    }

    #[test]
    fn checkerboard_downsample_only_uses_source_values() {
        let mut img = RgbImage::filled(64, 64, [0, 0, 0]).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if (x + y) % 2 == 0 {
                    img.put(x, y, [255, 255, 255]);
                }
            }
        }
        let t = preprocess_image(&img, 32).unwrap();
        // Nearest neighbour: output (x, y) samples source (2x, 2y), always white.
        for y in 0..32 {
            for x in 0..32 {
                let src = img.get(2 * x, 2 * y)[0] as f64 / 255.0;
                let v = t.data()[(y * 32 + x) * 3];
                assert_eq!(v, (src - 0.5) / 0.5);
                assert!(v == 1.0 || v == -1.0);
            }
        }
    }

    #[test]
    fn empty_image_is_rejected() {
        assert!(matches!(RgbImage::new(0, 3, vec![]), Err(Error::Input(_))));
    }

    #[test]
    fn patch_shapes() {
        let img = Tensor::zeros([32, 32, 3]);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[16, 192]);
        let whole = patchify(&img, 32).unwrap();
        assert_eq!(whole.shape(), &[1, 32 * 32 * 3]);
        assert!(matches!(patchify(&img, 5), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_patch_is_whole_image() {
        let data: Vec<f64> = (0..8 * 8 * 3).map(|i| i as f64).collect();
        let img = Tensor::new([8, 8, 3], data.clone()).unwrap();
        assert_eq!(patchify(&img, 8).unwrap().data(), &data[..]);
    }

    #[test]
    fn first_patch_holds_top_left_block() {
        let data: Vec<f64> = (0..16 * 16 * 3).map(|i| i as f64).collect();
        let img = Tensor::new([16, 16, 3], data).unwrap();
        let patches = patchify(&img, 4).unwrap();
        // Second row of the first patch starts at pixel (x=0, y=1).
        assert_eq!(patches.row(0)[12], (16 * 3) as f64);
        // Patch 1 is the block to the right of patch 0.
        assert_eq!(patches.row(1)[0], (4 * 3) as f64);
    }
}
