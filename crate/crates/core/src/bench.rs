//! Relative timing of single-level against multi-level stylization.
//!
//! Both paths start from precomputed encoder features, so the figures cover
//! only attention, fusion and decoding.

use std::time::{Duration, Instant};

use crate::image_io::{synth_image, SynthKind};
use crate::network::{
    multi_level_combine, sanet_attend, sanet_fuse, FeatureMap, Level, NetworkError, TransformNet,
};

/// Input extents reported by default.
pub const BENCH_SIZES: [usize; 2] = [256, 512];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub size: usize,
    pub repeats: usize,
    /// Level-A attention, fusion and decoding; fastest of `repeats` runs.
    pub single: Duration,
    /// Both attention modules, the combining convolution and decoding.
    pub multi: Duration,
}

impl BenchResult {
    /// `multi / single`; above 1 when the single-level path is faster.
    pub fn ratio(&self) -> f64 {
        self.multi.as_secs_f64() / self.single.as_secs_f64()
    }
}

fn timed<F: FnMut() -> Result<(), NetworkError>>(f: &mut F) -> Result<Duration, NetworkError> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed())
}

fn fused(
    net: &TransformNet<f32>,
    level: Level,
    c: &FeatureMap<f32>,
    s: &FeatureMap<f32>,
) -> Result<FeatureMap<f32>, NetworkError> {
    let p = net.sanet(level);
    sanet_fuse(p, c, &sanet_attend(p, c, s)?)
}

/// Times both paths on a synthetic `size`×`size` content/style pair.
pub fn bench(
    net: &TransformNet<f32>,
    size: usize,
    repeats: usize,
) -> Result<BenchResult, NetworkError> {
    let content = synth_image(1, size, size, SynthKind::Blobs)?;
    let style = synth_image(2, size, size, SynthKind::Stripes)?;
    let ec = net.encode_image(&content)?;
    let es = net.encode_image(&style)?;
    let (ca, sa, cb, sb) = (ec.level_a(), es.level_a(), ec.level_b(), es.level_b());

    let mut single_path = || {
        let fa = fused(net, Level::A, &ca, &sa)?;
        net.decode(&fa).map(drop)
    };
    let mut multi_path = || {
        let fa = fused(net, Level::A, &ca, &sa)?;
        let fb = fused(net, Level::B, &cb, &sb)?;
        let fm = multi_level_combine(&fa, &fb, &net.fuse)?;
        net.decode(&fm).map(drop)
    };
    // Interleaved so that drift in machine load hits both paths alike.
    let (mut single, mut multi) = (Duration::MAX, Duration::MAX);
    for _ in 0..repeats.max(1) {
        single = single.min(timed(&mut single_path)?);
        multi = multi.min(timed(&mut multi_path)?);
    }
    Ok(BenchResult {
        size,
        repeats,
        single,
        multi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetConfig;

    #[test]
    fn times_both_paths() {
        let net = TransformNet::new(NetConfig::with_feat(8), 1);
        let r = bench(&net, 64, 2).unwrap();
        assert_eq!((r.size, r.repeats), (64, 2));
        assert!(r.single > Duration::ZERO && r.multi > Duration::ZERO);
        assert!(r.ratio().is_finite());
    }

    #[test]
    fn rejects_bad_extent() {
        let net = TransformNet::new(NetConfig::with_feat(8), 1);
        assert!(bench(&net, 40, 1).is_err());
    }
}
