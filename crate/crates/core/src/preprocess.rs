//! mIF channel normalization, masked sliding-window tiling and paired crops.
//!
//! Each 16-bit channel is clipped to a per-channel range and quantized to
//! 8 bits. The range starts from the background median and an inflated
//! foreground 99th percentile, then is tightened by keeping only histogram
//! bins whose occupancy falls inside a frequency band. Windows of side `P`
//! are laid out on a `floor(0.7 P)` grid with per-window jitter and kept when
//! more than 90% of their pixels are tissue.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};

pub const MAX_16BIT: f64 = 65535.0;

/// H x W x C raster of 16-bit planes plus a binary tissue mask.
#[derive(Debug, Clone)]
pub struct MultiplexImage {
    pub channels: Vec<Array2<u16>>,
    pub mask: Array2<bool>,
}

impl MultiplexImage {
    pub fn new(channels: Vec<Array2<u16>>, mask: Array2<bool>) -> Result<Self> {
        if channels.is_empty() {
            return Err(AtlasError::Argument("image needs at least one channel".into()));
        }
        if channels.iter().any(|c| c.dim() != mask.dim()) {
            return Err(AtlasError::Argument(
                "every channel must match the mask dimensions".into(),
            ));
        }
        Ok(MultiplexImage { channels, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }
}

/// C planes of 8-bit intensities, all the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub channels: Vec<Array2<u8>>,
}

impl NormalizedImage {
    pub fn height(&self) -> usize {
        self.channels.first().map_or(0, |c| c.nrows())
    }

    pub fn width(&self) -> usize {
        self.channels.first().map_or(0, |c| c.ncols())
    }
}

/// Square window `[y_bottom, y_top) x [x_left, x_right)` in pixel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchCoord {
    pub x_left: usize,
    pub x_right: usize,
    pub y_bottom: usize,
    pub y_top: usize,
}

impl PatchCoord {
    pub fn square(x: usize, y: usize, size: usize) -> Self {
        PatchCoord {
            x_left: x,
            x_right: x + size,
            y_bottom: y,
            y_top: y + size,
        }
    }

    pub fn size(&self) -> usize {
        self.x_right - self.x_left
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x_right <= width && self.y_top <= height && self.x_left < self.x_right
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizeConfig {
    /// Minimum pixel margin of the upper bound above the background level.
    pub margin: f64,
    pub foreground_percentile: f64,
    pub upper_scale: f64,
    pub histogram_bins: usize,
    /// Smallest bin occupancy (pixels) that counts as signal.
    pub min_bin_count: usize,
    /// Largest bin occupancy as a fraction of in-range pixels.
    pub max_bin_fraction: f64,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig {
            margin: 500.0,
            foreground_percentile: 99.0,
            upper_scale: 1.1,
            histogram_bins: 256,
            min_bin_count: 8,
            max_bin_fraction: 0.02,
        }
    }
}

/// Linear-interpolated percentile of an ascending slice (`q` in 0..=100).
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn median_sorted(sorted: &[f64]) -> f64 {
    percentile_sorted(sorted, 50.0)
}

/// Provisional clipping range: background median and scaled foreground p99.
pub fn estimate_bounds(
    channel: ArrayView2<u16>,
    mask: ArrayView2<bool>,
    cfg: &NormalizeConfig,
) -> Result<(f64, f64)> {
    if channel.dim() != mask.dim() {
        return Err(AtlasError::Argument("channel and mask differ in size".into()));
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (v, m) in channel.iter().zip(mask.iter()) {
        if *m {
            fg.push(f64::from(*v));
        } else {
            bg.push(f64::from(*v));
        }
    }
    if fg.is_empty() || bg.is_empty() {
        return Err(AtlasError::Degenerate(format!(
            "mask has {} foreground and {} background pixels",
            fg.len(),
            bg.len()
        )));
    }
    fg.sort_by(f64::total_cmp);
    bg.sort_by(f64::total_cmp);
    let lo = median_sorted(&bg);
    let p = percentile_sorted(&fg, cfg.foreground_percentile);
    let hi = (cfg.upper_scale * p).max(lo + cfg.margin).min(MAX_16BIT);
    Ok((lo, hi.max(lo)))
}

/// Tightens `[lo, hi]` to the span of histogram bins whose counts fall in
/// `[min_bin_count, max_bin_fraction * in_range]`.
pub fn refine_bounds(
    channel: ArrayView2<u16>,
    lo: f64,
    hi: f64,
    cfg: &NormalizeConfig,
) -> (f64, f64) {
    if hi <= lo {
        return (lo, hi);
    }
    let bins = cfg.histogram_bins;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut in_range = 0usize;
    for &v in channel.iter() {
        let v = f64::from(v);
        if v < lo || v > hi {
            continue;
        }
        in_range += 1;
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let max_count = cfg.max_bin_fraction * in_range as f64;
    let kept: Vec<usize> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= cfg.min_bin_count && c as f64 <= max_count)
        .map(|(i, _)| i)
        .collect();
    match (kept.first(), kept.last()) {
        (Some(&first), Some(&last)) => (lo + first as f64 * width, lo + (last + 1) as f64 * width),
        _ => (lo, hi),
    }
}

/// Clip to `[lo, hi]`, scale to [0, 1] and quantize with round-half-up.
/// A zero-width range yields an all-zero plane.
pub fn normalize_with_bounds(channel: ArrayView2<u16>, lo: f64, hi: f64) -> Array2<u8> {
    if hi <= lo {
        return Array2::zeros(channel.dim());
    }
    let span = hi - lo;
    channel.mapv(|v| {
        let t = ((f64::from(v) - lo) / span).clamp(0.0, 1.0);
        (255.0 * t + 0.5).floor() as u8
    })
}

/// Full per-channel normalization: estimate, refine, quantize.
pub fn normalize_channel(
    channel: ArrayView2<u16>,
    mask: ArrayView2<bool>,
    cfg: &NormalizeConfig,
) -> Result<Array2<u8>> {
    let (lo, hi) = estimate_bounds(channel, mask, cfg)?;
    let (lo2, hi2) = refine_bounds(channel, lo, hi, cfg);
    Ok(normalize_with_bounds(channel, lo2, hi2))
}

/// Normalizes every channel. Channels with a degenerate mask come back as
/// `None` so the caller can drop them.
pub fn normalize_image(image: &MultiplexImage, cfg: &NormalizeConfig) -> Vec<Option<Array2<u8>>> {
    image
        .channels
        .iter()
        .map(|c| normalize_channel(c.view(), image.mask.view(), cfg).ok())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch: usize,
    /// Maximum jitter per axis; `None` means `floor(0.15 * patch)`.
    pub jitter: Option<usize>,
    /// Windows need strictly more than this tissue fraction.
    pub min_coverage: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch: 256,
            jitter: None,
            min_coverage: 0.9,
        }
    }
}

impl PatchConfig {
    pub fn stride(&self) -> usize {
        stride_for(self.patch)
    }

    pub fn max_jitter(&self) -> usize {
        self.jitter.unwrap_or(self.patch * 15 / 100)
    }
}

/// `floor(0.7 * patch)`, computed in integers.
pub fn stride_for(patch: usize) -> usize {
    patch * 7 / 10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridStatus {
    Ok,
    /// The image is smaller than one window.
    TooSmall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub coords: Vec<PatchCoord>,
    pub status: GridStatus,
}

/// Summed-area table with a zero border row and column.
struct Integral {
    sums: Array2<u64>,
}

impl Integral {
    fn new(mask: ArrayView2<bool>) -> Self {
        let (h, w) = mask.dim();
        let mut sums = Array2::<u64>::zeros((h + 1, w + 1));
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += u64::from(mask[[y, x]]);
                sums[[y + 1, x + 1]] = sums[[y, x + 1]] + row;
            }
        }
        Integral { sums }
    }

    fn count(&self, c: &PatchCoord) -> u64 {
        self.sums[[c.y_top, c.x_right]] + self.sums[[c.y_bottom, c.x_left]]
            - self.sums[[c.y_bottom, c.x_right]]
            - self.sums[[c.y_top, c.x_left]]
    }
}

/// Tissue fraction inside a window.
pub fn coverage(mask: ArrayView2<bool>, c: &PatchCoord) -> f64 {
    let window = mask.slice(s![c.y_bottom..c.y_top, c.x_left..c.x_right]);
    window.iter().filter(|m| **m).count() as f64 / window.len() as f64
}

/// Sliding-window tiling with jitter and a coverage filter, in row-major
/// grid order.
pub fn generate_patches(mask: ArrayView2<bool>, cfg: &PatchConfig, seed: u64) -> PatchGrid {
    let (h, w) = mask.dim();
    let p = cfg.patch;
    if p == 0 || h < p || w < p {
        return PatchGrid {
            coords: Vec::new(),
            status: GridStatus::TooSmall,
        };
    }
    let stride = cfg.stride().max(1);
    let jitter = cfg.max_jitter();
    let integral = Integral::new(mask);
    let mut rng = crate::rng::substream(seed, "patch_jitter");
    let area = (p * p) as f64;
    let mut coords = Vec::new();
    for y0 in (0..=h - p).step_by(stride) {
        for x0 in (0..=w - p).step_by(stride) {
            // Both draws happen for every window so the stream does not
            // depend on which windows survive the coverage filter.
            let (jx, jy) = if jitter > 0 {
                (rng.random_range(0..=jitter), rng.random_range(0..=jitter))
            } else {
                (0, 0)
            };
            let c = PatchCoord::square((x0 + jx).min(w - p), (y0 + jy).min(h - p), p);
            if integral.count(&c) as f64 / area > cfg.min_coverage {
                coords.push(c);
            }
        }
    }
    PatchGrid {
        coords,
        status: GridStatus::Ok,
    }
}

/// Crops the H&E (H x W x 3) and mIF rasters at the same pixel indices.
pub fn crop_pair(
    he: &Array3<u8>,
    mif: &NormalizedImage,
    coord: &PatchCoord,
) -> Result<(Array3<u8>, Array3<u8>)> {
    let (hh, hw, hc) = he.dim();
    if hc != 3 {
        return Err(AtlasError::Registration(format!("H&E raster has {hc} channels, expected 3")));
    }
    if (hh, hw) != (mif.height(), mif.width()) {
        return Err(AtlasError::Registration(format!(
            "H&E is {hw}x{hh} but mIF is {}x{}",
            mif.width(),
            mif.height()
        )));
    }
    if !coord.fits(hh, hw) {
        return Err(AtlasError::Registration(format!(
            "window {coord:?} outside {hw}x{hh} image"
        )));
    }
    let rows = coord.y_bottom..coord.y_top;
    let cols = coord.x_left..coord.x_right;
    let he_patch = he.slice(s![rows.clone(), cols.clone(), ..]).to_owned();
    let planes: Vec<_> = mif
        .channels
        .iter()
        .map(|c| c.slice(s![rows.clone(), cols.clone()]))
        .collect();
    let mif_patch = ndarray::stack(Axis(2), &planes)
        .map_err(|e| AtlasError::Registration(e.to_string()))?;
    Ok((he_patch, mif_patch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn two_level_plane() -> (Array2<u16>, Array2<bool>) {
        let mask = Array2::from_shape_fn((20, 20), |(y, _)| y >= 10);
        let plane = mask.mapv(|m| if m { 1000 } else { 100 });
        (plane, mask)
    }

    #[test]
    fn constant_levels_give_expected_bounds() {
        let (plane, mask) = two_level_plane();
        let (lo, hi) = estimate_bounds(plane.view(), mask.view(), &NormalizeConfig::default()).unwrap();
        assert_eq!(lo, 100.0);
        assert!((hi - 1100.0).abs() < 1e-9);
    }

    #[test]
    fn upper_bound_clamped_to_16_bit() {
        let mask = Array2::from_shape_fn((10, 10), |(y, _)| y >= 5);
        let plane = mask.mapv(|m| if m { 65000 } else { 10 });
        let (_, hi) = estimate_bounds(plane.view(), mask.view(), &NormalizeConfig::default()).unwrap();
        assert_eq!(hi, 65535.0);
    }

    #[test]
    fn margin_keeps_range_open() {
        let mask = Array2::from_shape_fn((10, 10), |(y, _)| y >= 5);
        let plane = mask.mapv(|m| if m { 110 } else { 100 });
        let (lo, hi) = estimate_bounds(plane.view(), mask.view(), &NormalizeConfig::default()).unwrap();
        assert_eq!((lo, hi), (100.0, 600.0));
    }

    #[test]
    fn degenerate_mask_is_an_error() {
        let plane = Array2::<u16>::zeros((4, 4));
        let all = Array2::from_elem((4, 4), true);
        assert!(matches!(
            estimate_bounds(plane.view(), all.view(), &NormalizeConfig::default()),
            Err(AtlasError::Degenerate(_))
        ));
    }

    /// Independent oracle: full sort, nearest-rank interpolation written out by hand.
    fn oracle_bounds(plane: &Array2<u16>, mask: &Array2<bool>) -> (f64, f64) {
        let mut bg: Vec<u16> = plane.iter().zip(mask).filter(|(_, m)| !**m).map(|(v, _)| *v).collect();
        let mut fg: Vec<u16> = plane.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
        bg.sort_unstable();
        fg.sort_unstable();
        let med = if bg.len() % 2 == 1 {
            f64::from(bg[bg.len() / 2])
        } else {
            (f64::from(bg[bg.len() / 2 - 1]) + f64::from(bg[bg.len() / 2])) / 2.0
        };
        let rank = 0.99 * (fg.len() - 1) as f64;
        let k = rank as usize;
        let frac = rank - k as f64;
        let p99 = if k + 1 < fg.len() {
            f64::from(fg[k]) * (1.0 - frac) + f64::from(fg[k + 1]) * frac
        } else {
            f64::from(fg[k])
        };
        let hi = (1.1 * p99).max(med + 500.0).min(65535.0);
        (med, hi)
    }

    #[test]
    fn mixed_plane_matches_sort_oracle() {
        let mut rng = crate::rng::seeded(11);
        let mask = Array2::from_shape_fn((32, 32), |(y, x)| (x * 7 + y * 3) % 5 != 0);
        let plane = Array2::from_shape_fn((32, 32), |(y, x)| {
            if mask[[y, x]] {
                rng.random_range(200..30000u16)
            } else {
                rng.random_range(0..400u16)
            }
        });
        let got = estimate_bounds(plane.view(), mask.view(), &NormalizeConfig::default()).unwrap();
        let want = oracle_bounds(&plane, &mask);
        assert!((got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9, "{got:?} vs {want:?}");
    }

    #[test]
    fn refine_falls_back_when_no_bin_qualifies() {
        // 64 pixels in one value: a single bin holding 100% > 2%.
        let plane = Array2::from_elem((8, 8), 500u16);
        let cfg = NormalizeConfig::default();
        assert_eq!(refine_bounds(plane.view(), 0.0, 1000.0, &cfg), (0.0, 1000.0));
    }

    #[test]
    fn refine_uniform_histogram_keeps_range() {
        // 256 bins over [0, 2560), 10 pixels each.
        let plane = Array2::from_shape_fn((256, 10), |(i, j)| (i * 10 + j) as u16);
        let cfg = NormalizeConfig {
            min_bin_count: 0,
            ..Default::default()
        };
        let (lo, hi) = refine_bounds(plane.view(), 0.0, 2560.0, &cfg);
        assert!((lo - 0.0).abs() < 1e-9 && (hi - 2560.0).abs() < 1e-9);
    }

    #[test]
    fn refine_bimodal_matches_enumerated_bins() {
        // Range [0, 256): one unit per bin. Spike of 5000 at 0 (too frequent),
        // bins 40..=60 get 20 pixels each, bin 200 gets 3 (too rare).
        let mut values = vec![0u16; 5000];
        for b in 40..=60u16 {
            values.extend(std::iter::repeat_n(b, 20));
        }
        values.extend([200u16; 3]);
        let n = values.len();
        let plane = Array2::from_shape_vec((1, n), values.clone()).unwrap();
        let cfg = NormalizeConfig::default();

        let max_count = 0.02 * n as f64;
        let mut counts = [0usize; 256];
        for v in &values {
            counts[*v as usize] += 1;
        }
        let kept: Vec<usize> = (0..256)
            .filter(|&b| counts[b] >= 8 && counts[b] as f64 <= max_count)
            .collect();
        let want = (kept[0] as f64, (*kept.last().unwrap() + 1) as f64);
        assert_eq!(want, (40.0, 61.0));
        assert_eq!(refine_bounds(plane.view(), 0.0, 256.0, &cfg), want);
    }

    #[test]
    fn quantization_endpoints_and_midpoint() {
        let plane = ndarray::array![[100u16, 200, 150, 50, 300]];
        let out = normalize_with_bounds(plane.view(), 100.0, 200.0);
        assert_eq!(out.row(0).to_vec(), vec![0, 255, 128, 0, 255]);
    }

    #[test]
    fn degenerate_range_gives_zero_plane() {
        let plane = ndarray::array![[7u16, 9]];
        assert_eq!(normalize_with_bounds(plane.view(), 5.0, 5.0), ndarray::array![[0u8, 0]]);
    }

    #[test]
    fn identity_bounds_are_idempotent_on_8_bit_data() {
        let plane = Array2::from_shape_fn((16, 16), |(y, x)| (y * 16 + x) as u16);
        let out = normalize_with_bounds(plane.view(), 0.0, 255.0);
        assert_eq!(out.mapv(u16::from), plane);
    }

    #[test]
    fn stride_for_256() {
        assert_eq!(stride_for(256), 179);
    }

    #[test]
    fn background_mask_yields_nothing() {
        let mask = Array2::from_elem((600, 600), false);
        assert!(generate_patches(mask.view(), &PatchConfig::default(), 1).coords.is_empty());
    }

    #[test]
    fn full_mask_grid_matches_enumeration() {
        let mask = Array2::from_elem((1024, 1024), true);
        let cfg = PatchConfig {
            jitter: Some(0),
            ..Default::default()
        };
        let grid = generate_patches(mask.view(), &cfg, 0);
        let positions = [0usize, 179, 358, 537, 716];
        let want: Vec<PatchCoord> = positions
            .iter()
            .flat_map(|&y| positions.iter().map(move |&x| PatchCoord::square(x, y, 256)))
            .collect();
        assert_eq!(grid.coords, want);
    }

    #[test]
    fn small_image_reports_status() {
        let mask = Array2::from_elem((100, 300), true);
        let grid = generate_patches(mask.view(), &PatchConfig::default(), 0);
        assert_eq!(grid.status, GridStatus::TooSmall);
        assert!(grid.coords.is_empty());
    }

    #[test]
    fn crop_pair_origin_and_mismatch() {
        let he = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| (y * 8 + x + c) as u8);
        let mif = NormalizedImage {
            channels: vec![Array2::from_shape_fn((8, 8), |(y, x)| (y * x) as u8); 2],
        };
        let c = PatchCoord::square(0, 0, 4);
        let (hp, mp) = crop_pair(&he, &mif, &c).unwrap();
        assert_eq!(hp, he.slice(s![0..4, 0..4, ..]).to_owned());
        assert_eq!(mp.dim(), (4, 4, 2));
        assert_eq!(mp.index_axis(Axis(2), 1), mif.channels[1].slice(s![0..4, 0..4]));

        let bad = NormalizedImage {
            channels: vec![Array2::zeros((8, 9))],
        };
        assert!(matches!(crop_pair(&he, &bad, &c), Err(AtlasError::Registration(_))));
        assert!(matches!(
            crop_pair(&he, &mif, &PatchCoord::square(6, 0, 4)),
            Err(AtlasError::Registration(_))
        ));
    }

    #[test]
    fn crop_means_match_window_oracle() {
        let mut rng = crate::rng::seeded(5);
        let mif = NormalizedImage {
            channels: (0..3)
                .map(|_| Array2::from_shape_fn((40, 50), |_| rng.random::<u8>()))
                .collect(),
        };
        let he = Array3::<u8>::zeros((40, 50, 3));
        let c = PatchCoord::square(13, 21, 16);
        let (_, mp) = crop_pair(&he, &mif, &c).unwrap();
        for ch in 0..3 {
            let mut sum = 0u64;
            for y in 21..37 {
                for x in 13..29 {
                    sum += u64::from(mif.channels[ch][[y, x]]);
                }
            }
            let got = mp.index_axis(Axis(2), ch).iter().map(|v| u64::from(*v)).sum::<u64>();
            assert_eq!(got, sum);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn emitted_windows_meet_coverage(
            h in 64usize..200, w in 64usize..200, blobs in 1usize..5, seed in 0u64..1000
        ) {
            let mut rng = crate::rng::seeded(seed);
            let centers: Vec<(f64, f64, f64)> = (0..blobs)
                .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(10.0..80.0)))
                .collect();
            let mask = Array2::from_shape_fn((h, w), |(y, x)| {
                centers.iter().any(|(cy, cx, r)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) < r * r)
            });
            let cfg = PatchConfig { patch: 32, jitter: None, min_coverage: 0.9 };
            let grid = generate_patches(mask.view(), &cfg, seed);
            for c in &grid.coords {
                prop_assert!(c.fits(h, w));
                prop_assert_eq!(c.size(), 32);
                prop_assert!(coverage(mask.view(), c) > 0.9);
            }
            prop_assert_eq!(&grid, &generate_patches(mask.view(), &cfg, seed));
        }

        #[test]
        fn normalization_is_monotone(lo in 0u16..1000, span in 1u16..5000, a in 0u16..8000, b in 0u16..8000) {
            let plane = ndarray::array![[a, b]];
            let out = normalize_with_bounds(plane.view(), f64::from(lo), f64::from(lo) + f64::from(span));
            if a >= b { prop_assert!(out[[0, 0]] >= out[[0, 1]]); }
        }
    }
}
