//! Image view of a load window: spectral features, a frozen convolution
//! stack, bilinear resize and 8-bit quantization, plus image negatives.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spectrum of a real vector. `pad` is the zero-padding added to reach the
/// power-of-two transform size used internally.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeatures {
    pub spectrum: Vec<Complex64>,
    pub pad: usize,
}

impl SpectralFeatures {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.spectrum.iter().map(|c| c.norm()).collect()
    }

    pub fn phases(&self) -> Vec<f64> {
        self.spectrum.iter().map(|c| c.arg()).collect()
    }
}

/// In-place iterative radix-2 transform. `buf.len()` must be a power of two.
fn fft_pow2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let w = Complex64::from_polar(1.0, ang * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + len / 2] * w;
                buf[start + k] = a + b;
                buf[start + k + len / 2] = a - b;
            }
        }
        len <<= 1;
    }
    if inverse {
        let inv = 1.0 / n as f64;
        buf.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Length-preserving DFT `F[k] = Σ x_t e^{-2πikt/l}`. Power-of-two lengths
/// use radix-2 directly; other lengths go through a chirp-z convolution
/// computed with zero-padded radix-2 transforms.
pub fn fft(x: &[f64]) -> SpectralFeatures {
    let n = x.len();
    if n <= 1 || n.is_power_of_two() {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        if n > 1 {
            fft_pow2(&mut buf, false);
        }
        return SpectralFeatures { spectrum: buf, pad: 0 };
    }
    let m = (2 * n - 1).next_power_of_two();
    // k² mod 2n keeps the chirp argument small
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
            Complex64::from_polar(1.0, -PI * k2 / n as f64)
        })
        .collect();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = chirp[k] * x[k];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    fft_pow2(&mut a, false);
    fft_pow2(&mut b, false);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    fft_pow2(&mut a, true);
    let spectrum = (0..n).map(|k| chirp[k] * a[k]).collect();
    SpectralFeatures { spectrum, pad: m - n }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageConfig {
    /// Output channels of the 1-D convolution.
    pub conv1d_channels: usize,
    pub conv1d_kernel: usize,
    /// Channels between the two 2-D convolutions.
    pub conv2d_channels: usize,
    pub conv2d_kernel: usize,
    /// Square output side.
    pub image_size: usize,
    pub group_size: usize,
    pub seed: u64,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            conv1d_channels: 8,
            conv1d_kernel: 5,
            conv2d_channels: 4,
            conv2d_kernel: 3,
            image_size: 224,
            group_size: 8,
            seed: 7,
        }
    }
}

/// Minimum side of the feature map handed to the resize stage.
pub const MIN_FEATURE_SIDE: usize = 8;

/// Seeded, frozen convolution weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub in_channels: usize,
    pub config: ImageConfig,
    /// `[out, in, k]`
    pub conv1d: Tensor,
    /// `[mid, 1, k, k]`
    pub conv2d_a: Tensor,
    /// `[1, mid, k, k]`
    pub conv2d_b: Tensor,
}

impl ConvStack {
    pub fn new(in_channels: usize, config: ImageConfig) -> Result<Self> {
        if in_channels == 0
            || config.conv1d_channels == 0
            || config.conv2d_channels == 0
            || config.conv1d_kernel % 2 == 0
            || config.conv2d_kernel % 2 == 0
        {
            return Err(Error::Config("conv channels must be positive and kernels odd".into()));
        }
        if config.image_size < 2 || config.group_size == 0 {
            return Err(Error::Config("image_size must be >= 2 and group_size >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c1, k1, c2, k2) = (config.conv1d_channels, config.conv1d_kernel, config.conv2d_channels, config.conv2d_kernel);
        let conv1d = Tensor::uniform(&[c1, in_channels, k1], 1.0 / ((in_channels * k1) as f64).sqrt(), &mut rng);
        let conv2d_a = Tensor::uniform(&[c2, 1, k2, k2], 1.0 / (k2 as f64), &mut rng);
        let conv2d_b = Tensor::uniform(&[1, c2, k2, k2], 1.0 / ((c2 * k2 * k2) as f64).sqrt(), &mut rng);
        Ok(Self { in_channels, config, conv1d, conv2d_a, conv2d_b })
    }

    /// `input` is `[c_in][len]`; zero 'same' padding, tanh activation.
    fn apply_1d(&self, input: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (c_out, k) = (self.config.conv1d_channels, self.config.conv1d_kernel);
        let len = input[0].len();
        let half = (k / 2) as isize;
        let w = self.conv1d.data();
        (0..c_out)
            .map(|o| {
                (0..len)
                    .map(|t| {
                        let mut acc = 0.0;
                        for (c, row) in input.iter().enumerate() {
                            for j in 0..k {
                                let src = t as isize + j as isize - half;
                                if (0..len as isize).contains(&src) {
                                    acc += w[(o * input.len() + c) * k + j] * row[src as usize];
                                }
                            }
                        }
                        acc.tanh()
                    })
                    .collect()
            })
            .collect()
    }

    /// Feature map pipeline for one segment; returns `(map, h0, w0)`.
    pub fn feature_map(&self, segment: &Tensor) -> (Vec<f64>, usize, usize) {
        let (s, d) = (segment.rows(), segment.cols());
        let scale = 1.0 / (s as f64).sqrt();
        let input: Vec<Vec<f64>> = (0..d)
            .map(|c| {
                let x: Vec<f64> = (0..s).map(|t| segment.at(t, c)).collect();
                let mags = fft(&x).magnitudes();
                x.into_iter().chain(mags.into_iter().map(|m| m * scale)).collect()
            })
            .collect();
        let flat: Vec<f64> = self.apply_1d(&input).into_iter().flatten().collect();
        let n = flat.len();
        let h0 = ((n as f64).sqrt().floor() as usize).max(MIN_FEATURE_SIDE);
        let w0 = n.div_ceil(h0).max(MIN_FEATURE_SIDE);
        let mut map = vec![0.0; h0 * w0];
        map[..n].copy_from_slice(&flat);

        let k = self.config.conv2d_kernel;
        let mid = self.config.conv2d_channels;
        let planes: Vec<Vec<f64>> =
            (0..mid).map(|c| conv2d(&map, h0, w0, &self.conv2d_a.data()[c * k * k..(c + 1) * k * k], k)).collect();
        let mut out = vec![0.0; h0 * w0];
        for (c, plane) in planes.iter().enumerate() {
            let act: Vec<f64> = plane.iter().map(|v| v.tanh()).collect();
            let y = conv2d(&act, h0, w0, &self.conv2d_b.data()[c * k * k..(c + 1) * k * k], k);
            out.iter_mut().zip(y).for_each(|(a, b)| *a += b);
        }
        (out, h0, w0)
    }
}

fn conv2d(img: &[f64], h: usize, w: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for a in 0..k {
                let si = i as isize + a as isize - half;
                if !(0..h as isize).contains(&si) {
                    continue;
                }
                for b in 0..k {
                    let sj = j as isize + b as isize - half;
                    if (0..w as isize).contains(&sj) {
                        acc += kernel[a * k + b] * img[si as usize * w + sj as usize];
                    }
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Source index pair and fractional weight for one target coordinate
/// under the align-corners convention.
pub fn source_coord(target: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    if dst_len <= 1 || src_len <= 1 {
        return (0, 0, 0.0);
    }
    let pos = target as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let lo = (pos.floor() as usize).min(src_len - 2);
    (lo, lo + 1, pos - lo as f64)
}

/// Align-corners bilinear resize of a row-major `h0 × w0` image.
pub fn bilinear_resize(img: &[f64], h0: usize, w0: usize, h: usize, w: usize) -> Vec<f64> {
    let cols: Vec<(usize, usize, f64)> = (0..w).map(|v| source_coord(v, w0, w)).collect();
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        let (y0, y1, fy) = source_coord(u, h0, h);
        for &(x0, x1, fx) in &cols {
            let top = img[y0 * w0 + x0] * (1.0 - fx) + img[y0 * w0 + x1] * fx;
            let bot = img[y1 * w0 + x0] * (1.0 - fx) + img[y1 * w0 + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Affine map of `[min, max]` onto `[0, 255]`, rounding half up. A constant
/// image maps to 128.
pub fn quantize(img: &[f64]) -> Vec<u8> {
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || range <= 1e-12 * lo.abs().max(hi.abs()) {
        return vec![128; img.len()];
    }
    img.iter().map(|&v| ((v - lo) / range * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageNegativeKind {
    None,
    PatchSwap,
    ColorJitter,
}

impl FromStr for ImageNegativeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch_swap" => Ok(Self::PatchSwap),
            "color_jitter" => Ok(Self::ColorJitter),
            other => Err(Error::Contract(format!("unknown image negative kind '{other}'"))),
        }
    }
}

/// `n` grayscale frames of `height × width` pixels, stored contiguously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageStack {
    pub frames: Vec<u8>,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub is_negative: bool,
    pub negative_kind: ImageNegativeKind,
}

impl ImageStack {
    pub fn frame(&self, i: usize) -> &[u8] {
        let sz = self.height * self.width;
        &self.frames[i * sz..(i + 1) * sz]
    }

    fn frame_mut(&mut self, i: usize) -> &mut [u8] {
        let sz = self.height * self.width;
        &mut self.frames[i * sz..(i + 1) * sz]
    }
}

/// Renders one frame per equal sub-segment of `history` (`l × d`).
pub fn render_frames(history: &Tensor, conv: &ConvStack, group_size: usize) -> Result<ImageStack> {
    let (l, d) = (history.rows(), history.cols());
    if group_size == 0 || l % group_size != 0 {
        return Err(Error::Contract(format!("group size {group_size} does not divide window length {l}")));
    }
    if d != conv.in_channels {
        return Err(Error::Contract(format!("conv stack expects {} channels, window has {d}", conv.in_channels)));
    }
    let seg = l / group_size;
    let side = conv.config.image_size;
    let mut frames = Vec::with_capacity(group_size * side * side);
    for g in 0..group_size {
        let segment = Tensor::new(vec![seg, d], history.data()[g * seg * d..(g + 1) * seg * d].to_vec())?;
        let (map, h0, w0) = conv.feature_map(&segment);
        frames.extend(quantize(&bilinear_resize(&map, h0, w0, side, side)));
    }
    Ok(ImageStack {
        frames,
        n: group_size,
        height: side,
        width: side,
        is_negative: false,
        negative_kind: ImageNegativeKind::None,
    })
}

/// Swaps quadrants `a` and `b` (row-major 0..4) of a frame.
pub fn swap_quadrants(frame: &mut [u8], height: usize, width: usize, a: usize, b: usize) {
    let (qh, qw) = (height / 2, width / 2);
    let origin = |q: usize| ((q / 2) * qh, (q % 2) * qw);
    let ((ay, ax), (by, bx)) = (origin(a), origin(b));
    if a == b {
        return;
    }
    for i in 0..qh {
        for j in 0..qw {
            frame.swap((ay + i) * width + ax + j, (by + i) * width + bx + j);
        }
    }
}

/// Brightness scales the frame mean, contrast scales deviations from it.
pub fn color_jitter(frame: &mut [u8], brightness: f64, contrast: f64) {
    let mean = frame.iter().map(|&p| f64::from(p)).sum::<f64>() / frame.len() as f64;
    for p in frame.iter_mut() {
        let v = contrast * (f64::from(*p) - mean) + brightness * mean;
        *p = v.round().clamp(0.0, 255.0) as u8;
    }
}

/// Largest jitter magnitude (75%).
pub const MAX_JITTER: f64 = 0.75;

pub fn make_image_negative(stack: &ImageStack, kind: ImageNegativeKind, rng: &mut impl Rng) -> Result<ImageStack> {
    if stack.is_negative {
        return Err(Error::Contract("negatives are built from positive stacks".into()));
    }
    let mut out = stack.clone();
    match kind {
        ImageNegativeKind::PatchSwap => {
            for i in 0..out.n {
                let a = rng.gen_range(0..4);
                let b = (a + rng.gen_range(1..4)) % 4;
                let (h, w) = (out.height, out.width);
                swap_quadrants(out.frame_mut(i), h, w, a, b);
            }
        }
        ImageNegativeKind::ColorJitter => {
            let factor = |rng: &mut dyn rand::RngCore| {
                let m = rng.gen_range(0.0..=MAX_JITTER);
                if rng.gen_bool(0.5) {
                    1.0 + m
                } else {
                    1.0 - m
                }
            };
            let (b, c) = (factor(rng), factor(rng));
            for i in 0..out.n {
                color_jitter(out.frame_mut(i), b, c);
            }
        }
        ImageNegativeKind::None => return Err(Error::Contract("negative kind 'none' is not a negative".into())),
    }
    out.is_negative = true;
    out.negative_kind = kind;
    Ok(out)
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, pixels: &[u8], height: usize, width: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// Writes `frame_<i>.pgm` for every frame of the stack.
pub fn export_stack_pgm(dir: &Path, stack: &ImageStack) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..stack.n {
        write_pgm(&dir.join(format!("frame_{i}.pgm")), stack.frame(i), stack.height, stack.width)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| Complex64::from_polar(v, -2.0 * PI * (k * t) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn fft_trivial_cases() {
        let f = fft(&[0.5; 8]);
        assert!((f.spectrum[0].re - 4.0).abs() < 1e-12);
        assert!(f.spectrum[1..].iter().all(|c| c.norm() < 1e-12));
        let mut imp = vec![0.0; 8];
        imp[0] = 1.0;
        assert!(fft(&imp).spectrum.iter().all(|c| (c - Complex64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 3, 4, 5, 8, 12, 16, 24, 64, 100] {
            for _ in 0..50 {
                let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let f = fft(&x);
                assert_eq!(f.spectrum.len(), n);
                assert_eq!(f.pad == 0, n.is_power_of_two());
                for (a, b) in f.spectrum.iter().zip(naive_dft(&x)) {
                    assert!((a - b).norm() < 1e-9, "n={n}");
                }
                for k in 1..n {
                    assert!((f.spectrum[k] - f.spectrum[n - k].conj()).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn resize_examples() {
        let img: Vec<f64> = (0..12).map(f64::from).collect();
        let same = bilinear_resize(&img, 3, 4, 3, 4);
        assert!(same.iter().zip(&img).all(|(a, b)| (a - b).abs() < 1e-12));
        let out = bilinear_resize(&[0.0, 0.0, 2.0, 2.0], 2, 2, 3, 3);
        assert_eq!(&out[3..6], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn resize_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h0, w0, h, w) = (5, 7, 11, 13);
        let img: Vec<f64> = (0..h0 * w0).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let out = bilinear_resize(&img, h0, w0, h, w);
        for u in 0..h {
            for v in 0..w {
                let sy = u as f64 * (h0 - 1) as f64 / (h - 1) as f64;
                let sx = v as f64 * (w0 - 1) as f64 / (w - 1) as f64;
                let (y0, x0) = ((sy.floor() as usize).min(h0 - 2), (sx.floor() as usize).min(w0 - 2));
                let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
                let weights = [(1.0 - dy) * (1.0 - dx), (1.0 - dy) * dx, dy * (1.0 - dx), dy * dx];
                assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let nb = [img[y0 * w0 + x0], img[y0 * w0 + x0 + 1], img[(y0 + 1) * w0 + x0], img[(y0 + 1) * w0 + x0 + 1]];
                let expect: f64 = weights.iter().zip(nb).map(|(a, b)| a * b).sum();
                let got = out[u * w + v];
                assert!((got - expect).abs() < 1e-12);
                let lo = nb.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = nb.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.0, 1.0]), [0, 255]);
        assert!(quantize(&[7.3; 9]).iter().all(|&p| p == 128));
        assert_eq!(quantize(&[0.0, 0.5 / 255.0, 1.0]), [0, 1, 255]);
    }

    proptest! {
        #[test]
        fn quantize_preserves_order(mut v in prop::collection::vec(-1e3f64..1e3, 2..64)) {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = quantize(&v);
            prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    fn window(l: usize, d: usize, phase: f64) -> Tensor {
        let data = (0..l * d)
            .map(|i| ((i / d) as f64 * 2.0 * PI / 24.0 + phase + (i % d) as f64).sin())
            .collect();
        Tensor::new(vec![l, d], data).unwrap()
    }

    fn small_config() -> ImageConfig {
        ImageConfig { image_size: 32, group_size: 4, ..ImageConfig::default() }
    }

    #[test]
    fn render_basic_properties() {
        let conv = ConvStack::new(2, small_config()).unwrap();
        let zero = render_frames(&Tensor::zeros(&[96, 2]), &conv, 4).unwrap();
        assert!(zero.frames.iter().all(|&p| p == 128));
        let a = render_frames(&window(96, 2, 0.0), &conv, 4).unwrap();
        let b = render_frames(&window(96, 2, 0.0), &conv, 4).unwrap();
        assert_eq!(a, b);
        let c = render_frames(&window(96, 2, 1.3), &conv, 4).unwrap();
        let l1: u64 = a.frames.iter().zip(&c.frames).map(|(x, y)| u64::from(x.abs_diff(*y))).sum();
        assert!(l1 > 0);
        assert!(matches!(render_frames(&window(90, 2, 0.0), &conv, 4), Err(Error::Contract(_))));
        assert_eq!((a.n, a.height, a.width), (4, 32, 32));
        assert_eq!(ConvStack::new(2, small_config()).unwrap(), conv);
    }

    #[test]
    fn feature_map_at_least_eight_square() {
        let conv = ConvStack::new(1, small_config()).unwrap();
        let (_, h0, w0) = conv.feature_map(&window(2, 1, 0.0));
        assert!(h0 >= MIN_FEATURE_SIDE && w0 >= MIN_FEATURE_SIDE);
    }

    #[test]
    fn negatives() {
        let conv = ConvStack::new(2, small_config()).unwrap();
        let pos = render_frames(&window(96, 2, 0.4), &conv, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let swap = make_image_negative(&pos, ImageNegativeKind::PatchSwap, &mut rng).unwrap();
        assert!(swap.is_negative);
        for i in 0..pos.n {
            let (mut a, mut b) = (pos.frame(i).to_vec(), swap.frame(i).to_vec());
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
        assert_ne!(swap.frames, pos.frames);
        let jit = make_image_negative(&pos, ImageNegativeKind::ColorJitter, &mut rng).unwrap();
        assert_eq!(jit.negative_kind, ImageNegativeKind::ColorJitter);
        assert!(make_image_negative(&jit, ImageNegativeKind::PatchSwap, &mut rng).is_err());
        assert!(make_image_negative(&pos, ImageNegativeKind::None, &mut rng).is_err());
        assert!(matches!("rotate".parse::<ImageNegativeKind>(), Err(Error::Contract(_))));
    }

    #[test]
    fn jitter_identity_and_commanded_brightness() {
        let frame: Vec<u8> = (0..64).map(|i| 60 + i as u8).collect();
        let mut same = frame.clone();
        color_jitter(&mut same, 1.0, 1.0);
        assert_eq!(same, frame);
        let mean = |f: &[u8]| f.iter().map(|&p| f64::from(p)).sum::<f64>() / f.len() as f64;
        for (b, c) in [(1.3, 0.8), (0.6, 1.2), (1.1, 1.75)] {
            let mut j = frame.clone();
            color_jitter(&mut j, b, c);
            assert!(j.iter().all(|&p| p > 0 && p < 255), "no clamping for this case");
            assert!((mean(&j) - b * mean(&frame)).abs() <= 1.0);
        }
    }

    #[test]
    fn pgm_export() {
        let dir = tempfile::tempdir().unwrap();
        let conv = ConvStack::new(1, small_config()).unwrap();
        let stack = render_frames(&window(32, 1, 0.0), &conv, 4).unwrap();
        export_stack_pgm(dir.path(), &stack).unwrap();
        let bytes = std::fs::read(dir.path().join("frame_2.pgm")).unwrap();
        let header = b"P5\n32 32\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], stack.frame(2));
    }
}
