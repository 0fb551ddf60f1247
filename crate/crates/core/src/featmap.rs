//! FeatMap-Net: multi-scale convolutional trunk with shared blocks, a
//! scale-specific final block, upscale-and-concatenate fusion, and 2-level
//! sliding pyramid pooling.

use crate::error::{CtxError, Result};
use crate::optim::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub convs: usize,
    pub pool_stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatMapConfig {
    pub in_channels: usize,
    /// Image scales, sorted descending; scales[0] defines the output grid.
    pub scales: Vec<f64>,
    pub shared_blocks: Vec<BlockConfig>,
    /// Scale-specific final block ("Conv Block 6"); its last pooling has stride 1.
    pub scale_block: BlockConfig,
    /// Sliding pyramid pooling windows, odd so stride-1 padding preserves shape.
    pub pool_windows: Vec<usize>,
    pub downsample_factor: usize,
}

impl Default for FeatMapConfig {
    fn default() -> Self {
        FeatMapConfig {
            in_channels: 3,
            scales: vec![1.2, 0.8, 0.4],
            shared_blocks: vec![
                BlockConfig { channels: 8, convs: 1, pool_stride: 2 },
                BlockConfig { channels: 12, convs: 1, pool_stride: 2 },
                BlockConfig { channels: 16, convs: 1, pool_stride: 2 },
                BlockConfig { channels: 16, convs: 1, pool_stride: 2 },
            ],
            scale_block: BlockConfig { channels: 8, convs: 1, pool_stride: 1 },
            pool_windows: vec![5, 9],
            downsample_factor: 16,
        }
    }
}

impl FeatMapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(CtxError::InvalidConfig("scales: empty".into()));
        }
        if self.scales.windows(2).any(|w| w[0] <= w[1]) {
            return Err(CtxError::InvalidConfig(format!(
                "scales: must be sorted descending, got {:?}",
                self.scales
            )));
        }
        if self.scales.iter().any(|&s| s <= 0.0) {
            return Err(CtxError::InvalidConfig("scales: must be positive".into()));
        }
        let stride_product: usize = self.shared_blocks.iter().map(|b| b.pool_stride).product();
        if stride_product != self.downsample_factor {
            return Err(CtxError::InvalidConfig(format!(
                "downsample_factor: {} != product of shared pool strides {}",
                self.downsample_factor, stride_product
            )));
        }
        if let Some(&w) = self.pool_windows.iter().find(|&&w| w % 2 == 0) {
            return Err(CtxError::InvalidConfig(format!("pool_windows: window {w} is even")));
        }
        if self.shared_blocks.iter().any(|b| b.channels == 0 || b.convs == 0)
            || self.scale_block.channels == 0
            || self.scale_block.convs == 0
        {
            return Err(CtxError::InvalidConfig("shared_blocks: zero channels or convs".into()));
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Per-scale channel count after the scale-specific block.
    pub fn d_scale(&self) -> usize {
        self.scale_block.channels
    }

    /// Final feature dimension: (1 + |windows|) * num_scales * d_scale.
    pub fn d_total(&self) -> usize {
        (1 + self.pool_windows.len()) * self.num_scales() * self.d_scale()
    }

    pub fn min_input_side(&self) -> usize {
        let smin = self.scales.last().copied().unwrap_or(1.0);
        (self.downsample_factor as f64 / smin).ceil() as usize
    }

    fn scaled_dim(&self, scale: f64, d: usize) -> usize {
        ((scale * d as f64).round() as usize).max(1)
    }

    /// Spatial size of the output grid for an input of the given size.
    pub fn map_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let mut mh = self.scaled_dim(self.scales[0], h);
        let mut mw = self.scaled_dim(self.scales[0], w);
        for b in &self.shared_blocks {
            mh = mh.div_ceil(b.pool_stride);
            mw = mw.div_ceil(b.pool_stride);
        }
        (mh, mw)
    }
}

/// Axis-aligned receptive boxes in original-image coordinates, one per node
/// of the output grid. Used for visualization and coordinate mapping only.
#[derive(Clone, Debug)]
pub struct ReceptiveGeometry {
    pub h: usize,
    pub w: usize,
    /// (y0, y1, x0, x1) per node, row-major.
    pub boxes: Vec<(f64, f64, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct FeatureMap<T> {
    pub tensor: Tensor<T>,
    pub geometry: ReceptiveGeometry,
}

#[derive(Clone, Debug)]
pub struct FeatMapNet {
    pub config: FeatMapConfig,
}

fn uniform_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-r..r))).collect();
    Tensor::new(shape, data).unwrap()
}

impl FeatMapNet {
    pub fn new(config: FeatMapConfig) -> Result<Self> {
        config.validate()?;
        Ok(FeatMapNet { config })
    }

    /// Insert all trunk parameters under `prefix` into `store`. Shared-block
    /// names carry no scale index; each scale's final block carries exactly one.
    pub fn init_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let cfg = &self.config;
        let mut cin = cfg.in_channels;
        for (bi, b) in cfg.shared_blocks.iter().enumerate() {
            for cj in 0..b.convs {
                let fan_in = cin * 9;
                let fan_out = b.channels * 9;
                store.insert(
                    &format!("{prefix}shared.b{bi}.conv{cj}.w"),
                    uniform_init(rng, vec![b.channels, cin, 3, 3], fan_in, fan_out),
                )?;
                store.insert(&format!("{prefix}shared.b{bi}.conv{cj}.b"), Tensor::zeros(vec![b.channels]))?;
                cin = b.channels;
            }
        }
        let shared_out = cin;
        for si in 0..cfg.num_scales() {
            let mut cin = shared_out;
            for cj in 0..cfg.scale_block.convs {
                let fan_in = cin * 9;
                let fan_out = cfg.scale_block.channels * 9;
                store.insert(
                    &format!("{prefix}scale{si}.conv{cj}.w"),
                    uniform_init(rng, vec![cfg.scale_block.channels, cin, 3, 3], fan_in, fan_out),
                )?;
                store.insert(
                    &format!("{prefix}scale{si}.conv{cj}.b"),
                    Tensor::zeros(vec![cfg.scale_block.channels]),
                )?;
                cin = cfg.scale_block.channels;
            }
        }
        Ok(())
    }

    /// One conv block: 3x3 stride-1 pad-1 convs with ReLU, then max pooling.
    /// Stride-s pooling is ceil-mode (bottom/right -inf padding); stride-1
    /// pooling is a shape-preserving 3x3 window.
    fn block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        names: &[(String, String)],
        pool_stride: usize,
        mut x: Var,
    ) -> Result<Var> {
        for (wn, bn) in names {
            let w = tape.param(store, wn)?;
            let b = tape.param(store, bn)?;
            x = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.relu(x);
        }
        if pool_stride == 1 {
            x = tape.max_pool2d(x, 3, 1, 1)?;
        } else {
            let s = pool_stride;
            let (h, w) = (tape.value(x).shape()[1], tape.value(x).shape()[2]);
            let (pb, pr) = (h.div_ceil(s) * s - h, w.div_ceil(s) * s - w);
            if pb > 0 || pr > 0 {
                x = tape.pad2d(x, 0, pb, 0, pr, T::neg_infinity());
            }
            x = tape.max_pool2d(x, s, s, 0)?;
        }
        Ok(x)
    }

    fn block_names(&self, prefix: &str, bi: usize, convs: usize, scale: Option<usize>) -> Vec<(String, String)> {
        (0..convs)
            .map(|cj| match scale {
                None => (
                    format!("{prefix}shared.b{bi}.conv{cj}.w"),
                    format!("{prefix}shared.b{bi}.conv{cj}.b"),
                ),
                Some(si) => (
                    format!("{prefix}scale{si}.conv{cj}.w"),
                    format!("{prefix}scale{si}.conv{cj}.b"),
                ),
            })
            .collect()
    }

    /// Full trunk forward on the tape. Returns the [d_total, h, w] feature
    /// map variable.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prefix: &str,
        image: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (c, h, w) = {
            let s = tape.value(image).shape();
            (s[0], s[1], s[2])
        };
        if c != cfg.in_channels {
            return Err(CtxError::ShapeMismatch(format!(
                "featmap_forward: image has {c} channels, config expects {}",
                cfg.in_channels
            )));
        }
        let min_side = cfg.min_input_side();
        if h < min_side || w < min_side {
            return Err(CtxError::InvalidArgument(format!(
                "featmap_forward: image {h}x{w} too small, minimum side is {min_side}"
            )));
        }
        let (mh, mw) = cfg.map_dims(h, w);
        let mut scale_maps = Vec::with_capacity(cfg.num_scales());
        for (si, &scale) in cfg.scales.iter().enumerate() {
            let (sh, sw) = (cfg.scaled_dim(scale, h), cfg.scaled_dim(scale, w));
            let mut x = tape.bilinear_resize(image, sh, sw)?;
            for (bi, b) in cfg.shared_blocks.iter().enumerate() {
                let names = self.block_names(prefix, bi, b.convs, None);
                x = self.block(tape, store, &names, b.pool_stride, x)?;
            }
            let names = self.block_names(prefix, 0, cfg.scale_block.convs, Some(si));
            x = self.block(tape, store, &names, cfg.scale_block.pool_stride, x)?;
            let (xh, xw) = (tape.value(x).shape()[1], tape.value(x).shape()[2]);
            if (xh, xw) != (mh, mw) {
                x = tape.bilinear_resize(x, mh, mw)?;
            }
            scale_maps.push(x);
        }
        let fused = tape.concat_channels(&scale_maps)?;
        // On maps smaller than a configured window (small augmented inputs),
        // clamp to the largest valid odd window so channel count is stable.
        let max_win = 2 * mh.min(mw);
        let windows: Vec<usize> = cfg
            .pool_windows
            .iter()
            .map(|&k| if k > max_win { max_win - 1 + max_win % 2 } else { k })
            .collect();
        sliding_pyramid_pool(tape, fused, &windows)
    }

    /// Receptive boxes of the output grid, traced through the largest-scale
    /// branch by stride/pad arithmetic and mapped back to image coordinates.
    pub fn geometry(&self, h: usize, w: usize) -> ReceptiveGeometry {
        let cfg = &self.config;
        let scale = cfg.scales[0];
        let (mh, mw) = cfg.map_dims(h, w);
        // (jump, start, rf) per axis, in resized-image pixel units.
        let mut jump = 1.0f64;
        let mut start = 0.0f64;
        let mut rf = 1.0f64;
        let mut layer = |k: f64, s: f64, p: f64| {
            start += ((k - 1.0) / 2.0 - p) * jump;
            rf += (k - 1.0) * jump;
            jump *= s;
        };
        for b in cfg.shared_blocks.iter() {
            for _ in 0..b.convs {
                layer(3.0, 1.0, 1.0);
            }
            if b.pool_stride == 1 {
                layer(3.0, 1.0, 1.0);
            } else {
                layer(b.pool_stride as f64, b.pool_stride as f64, 0.0);
            }
        }
        for _ in 0..cfg.scale_block.convs {
            layer(3.0, 1.0, 1.0);
        }
        layer(3.0, 1.0, 1.0); // stride-1 pool of the scale block
        let half = rf / 2.0;
        let mut boxes = Vec::with_capacity(mh * mw);
        for r in 0..mh {
            let cy = (start + r as f64 * jump) / scale;
            let (y0, y1) = ((cy - half / scale).max(0.0), (cy + half / scale).min(h as f64));
            for c in 0..mw {
                let cx = (start + c as f64 * jump) / scale;
                let (x0, x1) = ((cx - half / scale).max(0.0), (cx + half / scale).min(w as f64));
                boxes.push((y0, y1, x0, x1));
            }
        }
        ReceptiveGeometry { h: mh, w: mw, boxes }
    }
}

/// Build a fresh FeatMap-Net with seeded initialization.
pub fn build_featmapnet<T: Scalar>(config: FeatMapConfig, rng_seed: u64) -> Result<(FeatMapNet, ParamStore<T>)> {
    let net = FeatMapNet::new(config)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    net.init_params(&mut store, "fm.", &mut rng)?;
    Ok((net, store))
}

/// For each window k: stride-1, pad-(k-1)/2 max pooling; results concatenated
/// to the original map in order [original, windows ascending].
pub fn sliding_pyramid_pool<T: Scalar>(tape: &mut Tape<T>, fmap: Var, windows: &[usize]) -> Result<Var> {
    let (h, w) = (tape.value(fmap).shape()[1], tape.value(fmap).shape()[2]);
    let mut parts = vec![fmap];
    let mut sorted: Vec<usize> = windows.to_vec();
    sorted.sort_unstable();
    for &k in &sorted {
        if k % 2 == 0 {
            return Err(CtxError::InvalidArgument(format!(
                "sliding_pyramid_pool: window {k} is even"
            )));
        }
        if k > 2 * h.min(w) {
            return Err(CtxError::InvalidArgument(format!(
                "sliding_pyramid_pool: window {k} exceeds 2*min(h,w) = {}",
                2 * h.min(w)
            )));
        }
        parts.push(tape.max_pool2d(fmap, k, 1, (k - 1) / 2)?);
    }
    if parts.len() == 1 {
        return Ok(fmap);
    }
    tape.concat_channels(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> FeatMapConfig {
        FeatMapConfig {
            in_channels: 2,
            scales: vec![1.0],
            shared_blocks: vec![BlockConfig { channels: 2, convs: 1, pool_stride: 2 }],
            scale_block: BlockConfig { channels: 2, convs: 1, pool_stride: 1 },
            pool_windows: vec![3],
            downsample_factor: 2,
        }
    }

    #[test]
    fn channel_arithmetic() {
        let cfg = FeatMapConfig::default();
        assert_eq!(cfg.d_total(), 3 * 3 * 8);
    }

    #[test]
    fn default_map_dims_64() {
        // 64x64 input, factor 16, largest scale 1.2 -> ceil(76.8/16) = 5.
        let cfg = FeatMapConfig::default();
        assert_eq!(cfg.map_dims(64, 64), (5, 5));
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = FeatMapConfig::default();
        cfg.scales = vec![0.4, 0.8];
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("scales"), "{e}");
        let mut cfg = FeatMapConfig::default();
        cfg.downsample_factor = 8;
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("downsample_factor"), "{e}");
        let mut cfg = FeatMapConfig::default();
        cfg.pool_windows = vec![4];
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("pool_windows"), "{e}");
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let (_, s1) = build_featmapnet::<f64>(FeatMapConfig::default(), 7).unwrap();
        let (_, s2) = build_featmapnet::<f64>(FeatMapConfig::default(), 7).unwrap();
        assert_eq!(s1.len(), s2.len());
        for name in s1.names() {
            assert_eq!(s1.value(name).unwrap().data(), s2.value(name).unwrap().data());
        }
    }

    #[test]
    fn parameter_name_scoping() {
        let (_, store) = build_featmapnet::<f64>(FeatMapConfig::default(), 0).unwrap();
        for name in store.names() {
            if name.contains("shared") {
                assert!(!name.contains("scale"), "shared name carries a scale index: {name}");
            } else {
                assert_eq!(name.matches("scale").count(), 1, "{name}");
            }
        }
        // one scale block per scale
        let scale_blocks: std::collections::BTreeSet<&str> = store
            .names()
            .filter(|n| n.contains("scale"))
            .map(|n| n.split('.').find(|s| s.starts_with("scale")).unwrap())
            .collect();
        assert_eq!(scale_blocks.len(), 3);
    }

    #[test]
    fn forward_deterministic_and_shaped() {
        let (net, store) = build_featmapnet::<f64>(FeatMapConfig::default(), 3).unwrap();
        let img = Tensor::full(vec![3, 64, 64], 0.25f64);
        let mut t1 = Tape::new();
        let v1 = t1.input(img.clone());
        let o1 = net.forward(&mut t1, &store, "fm.", v1).unwrap();
        assert_eq!(t1.value(o1).shape(), &[72, 5, 5]);
        let mut t2 = Tape::new();
        let v2 = t2.input(img);
        let o2 = net.forward(&mut t2, &store, "fm.", v2).unwrap();
        assert_eq!(t1.value(o1).data(), t2.value(o2).data());
    }

    #[test]
    fn too_small_image_names_minimum() {
        let (net, store) = build_featmapnet::<f64>(FeatMapConfig::default(), 3).unwrap();
        let img = Tensor::full(vec![3, 16, 16], 0.0f64);
        let mut tape = Tape::new();
        let v = tape.input(img);
        let e = net.forward(&mut tape, &store, "fm.", v).unwrap_err().to_string();
        assert!(e.contains("40"), "{e}");
    }

    #[test]
    fn pyramid_constant_map() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::full(vec![2, 6, 6], 1.5));
        let y = sliding_pyramid_pool(&mut tape, x, &[5, 9]).unwrap();
        assert_eq!(tape.value(y).shape(), &[6, 6, 6]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn pyramid_channel_count_and_spike() {
        let mut tape: Tape<f64> = Tape::new();
        let mut m = Tensor::zeros(vec![1, 9, 9]);
        m.data_mut()[4 * 9 + 4] = 7.0;
        let x = tape.input(m);
        let y = sliding_pyramid_pool(&mut tape, x, &[5, 9]).unwrap();
        assert_eq!(tape.value(y).shape()[0], 3);
        // window-5 channel: 5x5 block of 7s centered at the spike
        let v = tape.value(y);
        for r in 0..9 {
            for c in 0..9 {
                let expect = if (2..=6).contains(&r) && (2..=6).contains(&c) { 7.0 } else { 0.0 };
                assert_eq!(v.at3(1, r, c), expect, "at ({r},{c})");
            }
        }
    }

    #[test]
    fn pyramid_even_window_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::zeros(vec![1, 4, 4]));
        assert!(sliding_pyramid_pool(&mut tape, x, &[4]).is_err());
    }

    #[test]
    fn pyramid_empty_windows_is_identity() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::full(vec![2, 3, 3], 2.0));
        let y = sliding_pyramid_pool(&mut tape, x, &[]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn tiny_gradient_check() {
        use crate::gradcheck;
        let cfg = tiny_config();
        let (_net, mut store) = build_featmapnet::<f64>(cfg, 11).unwrap();
        let img = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let data = (0..2 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![2, 8, 8], data).unwrap()
        };
        let run = |s: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let v = tape.input(img.clone());
            let net = FeatMapNet::new(tiny_config()).unwrap();
            let o = net.forward(&mut tape, s, "fm.", v).unwrap();
            (tape, o)
        };
        let (tape, o) = run(&store);
        let loss = {
            let mut tape = tape;
            let l = tape.sum_all(o);
            tape.backward(l, 1.0, &mut [&mut store]).unwrap();
            tape.value(l).item()
        };
        assert!(loss.is_finite());
        let worst = gradcheck::check_store_grads(&mut store, 1e-5, 1e-6, |s| {
            let (tape, o) = run(s);
            let v: f64 = tape.value(o).data().iter().sum();
            v
        });
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn shared_block_sees_all_scales() {
        // Gradient of the shared conv differs when the input is perturbed in a
        // region only the small-scale branch reaches after rounding; cheap
        // proxy: shared grads are nonzero and change with the image.
        let cfg = FeatMapConfig {
            in_channels: 1,
            scales: vec![1.0, 0.5],
            shared_blocks: vec![BlockConfig { channels: 2, convs: 1, pool_stride: 2 }],
            scale_block: BlockConfig { channels: 2, convs: 1, pool_stride: 1 },
            pool_windows: vec![],
            downsample_factor: 2,
        };
        let (net, mut store) = build_featmapnet::<f64>(cfg.clone(), 1).unwrap();
        let mut grads = Vec::new();
        for fill in [0.5f64, 0.9] {
            store.zero_grads();
            let mut tape = Tape::new();
            let v = tape.input(Tensor::full(vec![1, 8, 8], fill));
            let o = net.forward(&mut tape, &store, "fm.", v).unwrap();
            let l = tape.sum_all(o);
            tape.backward(l, 1.0, &mut [&mut store]).unwrap();
            grads.push(store.grad("fm.shared.b0.conv0.w").unwrap().clone());
        }
        assert_ne!(grads[0].data(), grads[1].data());
        assert!(grads[0].data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn geometry_boxes_cover_image() {
        let net = FeatMapNet::new(FeatMapConfig::default()).unwrap();
        let geo = net.geometry(64, 64);
        assert_eq!(geo.h * geo.w, geo.boxes.len());
        for &(y0, y1, x0, x1) in &geo.boxes {
            assert!(y0 >= 0.0 && y1 <= 64.0 && y0 < y1);
            assert!(x0 >= 0.0 && x1 <= 64.0 && x0 < x1);
        }
    }
}
