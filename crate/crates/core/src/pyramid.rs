//! Image-level FPN, RoI-Align and the region-level ladder with deformable fusion.
//!
//! Parameter names:
//!
//! ```text
//! backbone.{stem,c3,c4,c5}.{w,b}     strided convs, strides 4/8/16/32
//! backbone.lat{2..5}.{w,b}           1x1 laterals
//! rfpn.block{1..4}.{a,b}.{w,b}       two 3x3 convs per rung
//! rfpn.fam{2..4}.{off1,dcn1,off2,dcn2}.{w,b}
//! rfpn.head{1..4}.{w,b}              1x1 mask logits
//! ```

use serde::{Deserialize, Serialize};

use crate::diff::{Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::mask::RUNG_SIDES;
use crate::synth::{BBox, IMAGE_SIDE};

/// Strides of P2..P5.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// i-FPN level feeding rungs 2, 3 and 4.
pub const RUNG_LEVELS: [usize; 3] = [4, 3, 2];
pub const NUM_RUNGS: usize = 4;
const OFFSET_CHANNELS: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width shared by the backbone and the ladder.
    pub channels: usize,
    /// Conv width inside the switch module.
    pub msm_hidden: usize,
    /// Width of the switch module's first fully-connected layer.
    pub msm_fc: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { channels: 32, msm_hidden: 4, msm_fc: 64 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 || self.msm_hidden == 0 || self.msm_fc == 0 {
            return Err(Error::Config(format!("model widths must be positive and channels >= 4, got {self:?}")));
        }
        Ok(())
    }
}

fn conv<T: Real>(s: &mut ParamStore<T>, name: &str, o: usize, c: usize, k: usize) -> Result<()> {
    s.init_fan_in(&format!("{name}.w"), &[o, c, k, k], c * k * k)?;
    s.init_zeros(&format!("{name}.b"), &[o])
}

/// Conv whose output is not rectified.
fn conv_linear<T: Real>(s: &mut ParamStore<T>, name: &str, o: usize, c: usize, k: usize) -> Result<()> {
    s.init_fan_in_gain(&format!("{name}.w"), &[o, c, k, k], c * k * k, 1.0)?;
    s.init_zeros(&format!("{name}.b"), &[o])
}

pub fn init_backbone<T: Real>(s: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels;
    conv(s, "backbone.stem", c, 3, 4)?;
    for name in ["c3", "c4", "c5"] {
        conv(s, &format!("backbone.{name}"), c, c, 3)?;
    }
    for l in 2..=5 {
        conv_linear(s, &format!("backbone.lat{l}"), c, c, 1)?;
    }
    Ok(())
}

/// Ladder parameters. Offset heads start at zero so each deformable conv
/// begins as a plain 3x3 conv; mask heads start at zero so every rung first
/// predicts 0.5 instead of a saturated sigmoid on the growing ladder features.
pub fn init_rfpn<T: Real>(s: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels;
    for k in 1..=NUM_RUNGS {
        conv(s, &format!("rfpn.block{k}.a"), c, c, 3)?;
        conv(s, &format!("rfpn.block{k}.b"), c, c, 3)?;
        s.init_zeros(&format!("rfpn.head{k}.w"), &[1, c, 1, 1])?;
        s.init_zeros(&format!("rfpn.head{k}.b"), &[1])?;
    }
    for k in 2..=NUM_RUNGS {
        let p = format!("rfpn.fam{k}");
        s.init_zeros(&format!("{p}.off1.w"), &[OFFSET_CHANNELS, 2 * c, 3, 3])?;
        s.init_zeros(&format!("{p}.off1.b"), &[OFFSET_CHANNELS])?;
        s.init_zeros(&format!("{p}.off2.w"), &[OFFSET_CHANNELS, c, 3, 3])?;
        s.init_zeros(&format!("{p}.off2.b"), &[OFFSET_CHANNELS])?;
        conv_linear(s, &format!("{p}.dcn1"), c, c, 3)?;
        conv_linear(s, &format!("{p}.dcn2"), c, c, 3)?;
    }
    Ok(())
}

/// P2..P5 of the image pyramid.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub levels: [Var; 4],
}

impl PyramidFeatures {
    /// Level `l` in `2..=5`.
    pub fn level(&self, l: usize) -> Var {
        self.levels[l - 2]
    }
}

fn conv_named<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    g.conv2d(x, p[format!("{name}.w").as_str()], Some(p[format!("{name}.b").as_str()]), stride, pad)
}

fn deform_named<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, offsets: Var) -> Result<Var> {
    g.deform_conv(x, p[format!("{name}.w").as_str()], Some(p[format!("{name}.b").as_str()]), offsets)
}

/// Strided conv backbone, 1x1 laterals and a nearest-neighbour top-down path.
pub fn backbone_ifpn<T: Real>(g: &mut Graph<T>, p: &Bound, image: Var) -> Result<PyramidFeatures> {
    if g.shape(image) != [3, IMAGE_SIDE, IMAGE_SIDE] {
        return Err(Error::shape(
            "backbone_ifpn",
            format!("image must be [3,{IMAGE_SIDE},{IMAGE_SIDE}], got {:?}", g.shape(image)),
        ));
    }
    let c2 = conv_named(g, p, "backbone.stem", image, 4, 0)?;
    let c2 = g.relu(c2);
    let mut bottom_up = vec![c2];
    for name in ["c3", "c4", "c5"] {
        let prev = *bottom_up.last().expect("stage");
        let x = conv_named(g, p, &format!("backbone.{name}"), prev, 2, 1)?;
        bottom_up.push(g.relu(x));
    }
    let mut top = conv_named(g, p, "backbone.lat5", bottom_up[3], 1, 0)?;
    let mut levels = [top; 4];
    for l in (2..=4).rev() {
        let lat = conv_named(g, p, &format!("backbone.lat{l}"), bottom_up[l - 2], 1, 0)?;
        let up = g.upsample_nearest2x(top)?;
        top = g.add(lat, up)?;
        levels[l - 2] = top;
    }
    Ok(PyramidFeatures { levels })
}

/// Level for the 14x14 crop: `floor(4 + log2(sqrt(wh)/224))` clamped to `[2, 5]`.
pub fn assign_level(bbox: &BBox) -> usize {
    let raw = 4.0 + (bbox.area().sqrt() / IMAGE_SIDE as f64).log2();
    (raw.floor() as i64).clamp(2, 5) as usize
}

/// Bin-centre sampling points of an `out x out` grid over `bbox`, in the
/// coordinates of a level with the given stride.
pub fn roi_points<T: Real>(bbox: &BBox, stride: usize, out: usize) -> Tensor<T> {
    let s = stride as f64;
    let (bh, bw) = (bbox.h as f64 / out as f64, bbox.w as f64 / out as f64);
    let mut pts = Vec::with_capacity(2 * out * out);
    for i in 0..out {
        let y = bbox.y as f64 + (i as f64 + 0.5) * bh;
        for j in 0..out {
            let x = bbox.x as f64 + (j as f64 + 0.5) * bw;
            pts.push(T::of(y / s - 0.5));
            pts.push(T::of(x / s - 0.5));
        }
    }
    Tensor::new(&[out * out, 2], pts).expect("roi grid")
}

/// One bilinear sample per bin, read from `level` (`[C,H,W]` at `stride`).
pub fn roi_align<T: Real>(g: &mut Graph<T>, level: Var, stride: usize, bbox: &BBox, out: usize) -> Result<Var> {
    if bbox.w == 0 || bbox.h == 0 {
        return Err(Error::InvalidArgument(format!("roi_align: degenerate box {bbox:?}")));
    }
    if out == 0 {
        return Err(Error::InvalidArgument("roi_align: output size must be positive".into()));
    }
    let c = g.shape(level)[0];
    let pts = g.constant(roi_points(bbox, stride, out));
    let flat = g.bilinear_sample(level, pts)?;
    g.reshape(flat, &[c, out, out])
}

/// Aligns the upsampled rung `up` to the image crop, then fuses the two.
pub fn fam_fuse<T: Real>(g: &mut Graph<T>, p: &Bound, rung: usize, up: Var, crop: Var) -> Result<Var> {
    if g.shape(up) != g.shape(crop) {
        return Err(Error::shape("fam_fuse", format!("upsampled rung {:?} vs crop {:?}", g.shape(up), g.shape(crop))));
    }
    let pre = format!("rfpn.fam{rung}");
    let both = g.concat_channels(up, crop)?;
    let off1 = conv_named(g, p, &format!("{pre}.off1"), both, 1, 1)?;
    let aligned = deform_named(g, p, &format!("{pre}.dcn1"), up, off1)?;
    let mixed = g.add(aligned, crop)?;
    let off2 = conv_named(g, p, &format!("{pre}.off2"), mixed, 1, 1)?;
    deform_named(g, p, &format!("{pre}.dcn2"), mixed, off2)
}

/// Scaled `|Laplacian|` of a soft mask, clamped to `[0, 1]`.
pub fn soft_edges<T: Real>(g: &mut Graph<T>, mask: Var) -> Result<Var> {
    let lap = g.laplacian(mask)?;
    let mag = g.abs(lap);
    let scaled = g.scale(mag, 0.25);
    Ok(g.clamp(scaled, 0.0, 1.0))
}

/// Per-rung features, soft masks and soft edges, coarsest first.
#[derive(Clone, Debug)]
pub struct RegionLadder {
    /// The 14x14 RoI-aligned crop the ladder (and the switch) starts from.
    pub roi: Var,
    pub features: Vec<Var>,
    pub masks: Vec<Var>,
    pub edges: Vec<Var>,
}

impl RegionLadder {
    pub fn depth(&self) -> usize {
        self.masks.len()
    }
}

fn block<T: Real>(g: &mut Graph<T>, p: &Bound, rung: usize, x: Var) -> Result<Var> {
    let a = conv_named(g, p, &format!("rfpn.block{rung}.a"), x, 1, 1)?;
    let a = g.relu(a);
    let b = conv_named(g, p, &format!("rfpn.block{rung}.b"), a, 1, 1)?;
    Ok(g.relu(b))
}

/// The 14x14 crop from the size-assigned level.
pub fn roi_feature<T: Real>(g: &mut Graph<T>, pyr: &PyramidFeatures, bbox: &BBox) -> Result<Var> {
    let l = assign_level(bbox);
    roi_align(g, pyr.level(l), LEVEL_STRIDES[l - 2], bbox, RUNG_SIDES[0])
}

/// Builds rungs `1..=depth` of the ladder for one box, starting from `roi`.
pub fn rfpn_from_roi<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    pyr: &PyramidFeatures,
    bbox: &BBox,
    roi: Var,
    depth: usize,
) -> Result<RegionLadder> {
    if !(1..=NUM_RUNGS).contains(&depth) {
        return Err(Error::InvalidArgument(format!("ladder depth {depth} outside 1..=4")));
    }
    let mut ladder = RegionLadder {
        roi,
        features: Vec::with_capacity(depth),
        masks: Vec::with_capacity(depth),
        edges: Vec::with_capacity(depth),
    };
    let mut feat = block(g, p, 1, roi)?;
    for k in 1..=depth {
        if k > 1 {
            let side = RUNG_SIDES[k - 1];
            let l = RUNG_LEVELS[k - 2];
            let up = g.upsample_bilinear2x(feat)?;
            let crop = roi_align(g, pyr.level(l), LEVEL_STRIDES[l - 2], bbox, side)?;
            let fused = fam_fuse(g, p, k, up, crop)?;
            feat = block(g, p, k, fused)?;
        }
        let side = RUNG_SIDES[k - 1];
        let logits = conv_named(g, p, &format!("rfpn.head{k}"), feat, 1, 0)?;
        let logits = g.reshape(logits, &[side, side])?;
        let mask = g.sigmoid(logits);
        ladder.edges.push(soft_edges(g, mask)?);
        ladder.masks.push(mask);
        ladder.features.push(feat);
    }
    Ok(ladder)
}

/// Full ladder forward for one box.
pub fn rfpn_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    pyr: &PyramidFeatures,
    bbox: &BBox,
    depth: usize,
) -> Result<RegionLadder> {
    let roi = roi_feature(g, pyr, bbox)?;
    rfpn_from_roi(g, p, pyr, bbox, roi, depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(c: usize, seed: u64) -> ParamStore<f32> {
        let cfg = ModelConfig { channels: c, ..ModelConfig::default() };
        let mut s = ParamStore::new(seed);
        init_backbone(&mut s, &cfg).unwrap();
        init_rfpn(&mut s, &cfg).unwrap();
        s
    }

    fn zero_biases(s: &mut ParamStore<f32>) {
        for (name, t) in s.iter_mut() {
            if name.ends_with(".b") {
                t.data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let s = store(32, 0);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let img = g.constant(Tensor::full(&[3, 224, 224], 0.3));
        let pyr = backbone_ifpn(&mut g, &p, img).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.levels.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![32, 56, 56], vec![32, 28, 28], vec![32, 14, 14], vec![32, 7, 7]]);
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let mut s = store(8, 1);
        zero_biases(&mut s);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let img = g.constant(Tensor::zeros(&[3, 224, 224]));
        let pyr = backbone_ifpn(&mut g, &p, img).unwrap();
        for v in pyr.levels {
            assert!(g.data(v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn non_224_input_is_rejected() {
        let s = store(8, 1);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let img = g.constant(Tensor::zeros(&[3, 112, 112]));
        assert!(backbone_ifpn(&mut g, &p, img).is_err());
    }

    #[test]
    fn level_assignment() {
        let b = |s| BBox { x: 0, y: 0, w: s, h: s };
        assert_eq!(assign_level(&b(224)), 4);
        assert_eq!(assign_level(&b(112)), 3);
        assert_eq!(assign_level(&b(56)), 2);
        assert_eq!(assign_level(&b(10)), 2);
    }

    #[test]
    fn roi_align_whole_level_is_identity() {
        let mut g = Graph::<f64>::new();
        let feat = Tensor::from_fn(&[2, 7, 7], |i| (i as f64 * 0.37).sin());
        let f = g.constant(feat.clone());
        let bbox = BBox { x: 0, y: 0, w: 224, h: 224 };
        let out = roi_align(&mut g, f, 32, &bbox, 7).unwrap();
        assert!(g.value(out).max_abs_diff(&feat) < 1e-12);
    }

    #[test]
    fn roi_align_constant_map() {
        let mut g = Graph::<f32>::new();
        let f = g.constant(Tensor::full(&[3, 28, 28], 1.5));
        let bbox = BBox { x: 40, y: 60, w: 90, h: 33 };
        let out = roi_align(&mut g, f, 8, &bbox, 14).unwrap();
        assert!(g.data(out).iter().all(|&v| (v - 1.5).abs() < 1e-6));
        let bad = BBox { x: 4, y: 4, w: 0, h: 3 };
        assert!(roi_align(&mut g, f, 8, &bad, 14).is_err());
    }

    #[test]
    fn ladder_shapes_and_zero_pyramid_probabilities() {
        let mut s = store(8, 2);
        zero_biases(&mut s);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let img = g.constant(Tensor::zeros(&[3, 224, 224]));
        let pyr = backbone_ifpn(&mut g, &p, img).unwrap();
        let bbox = BBox { x: 30, y: 50, w: 100, h: 70 };
        let ladder = rfpn_forward(&mut g, &p, &pyr, &bbox, 4).unwrap();
        for (k, &m) in ladder.masks.iter().enumerate() {
            let side = RUNG_SIDES[k];
            assert_eq!(g.shape(m), [side, side]);
            assert!(g.data(m).iter().all(|&v| v == 0.5));
            assert!(g.data(ladder.edges[k]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fam_rejects_mismatched_inputs() {
        let s = store(4, 0);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let a = g.constant(Tensor::zeros(&[4, 28, 28]));
        let b = g.constant(Tensor::zeros(&[4, 56, 56]));
        assert!(fam_fuse(&mut g, &p, 2, a, b).is_err());
        let out = fam_fuse(&mut g, &p, 2, a, a).unwrap();
        assert_eq!(g.shape(out), [4, 28, 28]);
    }

    #[test]
    fn large_mask_loss_reaches_backbone() {
        let mut s = store(4, 5);
        // A zero head blocks the signal by design; any trained head passes it.
        s.get_mut("rfpn.head4.w").unwrap().data_mut().fill(0.1);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let img = g.constant(Tensor::from_fn(&[3, 224, 224], |i| ((i % 97) as f32) / 97.0));
        let pyr = backbone_ifpn(&mut g, &p, img).unwrap();
        let bbox = BBox { x: 20, y: 20, w: 150, h: 120 };
        let ladder = rfpn_forward(&mut g, &p, &pyr, &bbox, 4).unwrap();
        let target = Tensor::full(&[112, 112], 1.0);
        let loss = g.bce(ladder.masks[3], &target, 1e-7).unwrap();
        g.backward(loss).unwrap();
        let norm: f32 = g.grad(p["backbone.stem.w"]).unwrap().iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
    }

    fn pyramid_leaves(g: &mut Graph<f32>, c: usize) -> PyramidFeatures {
        let levels = std::array::from_fn(|i| {
            let side = 56 >> i;
            g.param(Tensor::from_fn(&[c, side, side], |j| ((j * 7 + i) % 13) as f32 / 13.0))
        });
        PyramidFeatures { levels }
    }

    #[test]
    fn each_rung_reads_its_own_level() {
        let mut s = store(4, 9);
        for k in 1..=NUM_RUNGS {
            s.get_mut(&format!("rfpn.head{k}.w")).unwrap().data_mut().fill(0.2);
        }
        // A 40x40 box takes its 14x14 crop from P2, so P4 and P3 can only be
        // reached through the 28 and 56 rungs.
        let bbox = BBox { x: 60, y: 70, w: 40, h: 40 };
        assert_eq!(assign_level(&bbox), 2);
        for depth in 1..=NUM_RUNGS {
            let mut g = Graph::<f32>::new();
            let p = s.bind(&mut g);
            let pyr = pyramid_leaves(&mut g, 4);
            let ladder = rfpn_forward(&mut g, &p, &pyr, &bbox, depth).unwrap();
            let m = *ladder.masks.last().unwrap();
            let loss = g.sum(m);
            g.backward(loss).unwrap();
            let reached: Vec<bool> =
                (2..=5).map(|l| g.grad(pyr.level(l)).is_some_and(|d| d.iter().any(|&v| v != 0.0))).collect();
            let expected = match depth {
                1 => [true, false, false, false],
                2 => [true, false, true, false],
                _ => [true, true, true, false],
            };
            assert_eq!(reached, expected, "depth {depth}");
        }
    }

    #[test]
    fn ladder_is_deterministic() {
        let s = store(4, 3);
        let run = || {
            let mut g = Graph::<f32>::new();
            let p = s.bind(&mut g);
            let img = g.constant(Tensor::from_fn(&[3, 224, 224], |i| ((i % 31) as f32) / 31.0));
            let pyr = backbone_ifpn(&mut g, &p, img).unwrap();
            let ladder = rfpn_forward(&mut g, &p, &pyr, &BBox { x: 10, y: 30, w: 120, h: 90 }, 4).unwrap();
            ladder.features.iter().map(|&f| g.data(f).to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
