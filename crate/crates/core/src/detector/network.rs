//! Backbone, prediction heads and the per-frame forward and backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::config::{DetectorConfig, STRIDES};
use super::loss::{frame_loss, LossBreakdown};
use crate::correlation::FeaturePyramid;
use crate::dataset::Sample;
use crate::error::{invalid, Error, Result};
use crate::mstf::{Checkpoint, FlowState, Mstf, StepCache};
use crate::numerics::activation::{silu_backward, silu_forward};
use crate::numerics::{ConvLayer, Grads, Init, ParamId, ParamStore, Real, Tensor};

/// Name prefix of the fusion neck's parameters.
const NECK_PREFIX: &str = "mstf.";
/// Checkpoint tensor prefix for model parameters.
pub const MODEL_PREFIX: &str = "model.";
pub const CHECKPOINT_KIND: &str = "mstf-detector";

/// One frame of a stream, tagged so batches can be checked for stream mixing.
#[derive(Debug, Clone, Copy)]
pub struct FrameRef<'a, T> {
    pub video_id: u32,
    pub frame_index: u32,
    pub image: &'a Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    down: ConvLayer,
    body: ConvLayer,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    hidden: ConvLayer,
    out: ConvLayer,
}

/// Input and pre-activation of a convolution followed by SiLU.
#[derive(Debug, Clone)]
struct ConvAct<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
}

#[derive(Debug, Clone)]
struct FramePass<T> {
    stem: Vec<ConvAct<T>>,
    /// (down, body) per stage; the body input is the down activation.
    stages: Vec<(ConvAct<T>, ConvAct<T>)>,
    neck: Option<StepCache<T>>,
    heads: Vec<ConvAct<T>>,
    outputs: Vec<Tensor<T>>,
}

/// Anchor-free three-level detector with an optional fusion neck between
/// the backbone pyramid and the heads.
///
/// Each head emits `num_classes` logits followed by four raw edge distances
/// per cell; see [`decode`](super::decode).
#[derive(Debug, Clone)]
pub struct Detector<T> {
    config: DetectorConfig,
    params: ParamStore<T>,
    stem: [ConvLayer; 2],
    stages: [Stage; 3],
    heads: [Head; 3],
    neck: Option<Mstf>,
}

/// Initial class prior of 1%.
fn class_prior_bias() -> f64 {
    -(99.0f64).ln()
}

impl<T: Real> Detector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    /// The same network with the fusion neck left out entirely. Parameters
    /// other than the neck's match [`Detector::new`] for the same seed.
    pub fn without_neck(config: DetectorConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    fn build(config: DetectorConfig, seed: u64, with_neck: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let he = Init::Kaiming(1.0);
        let [s0, s1] = config.stem_widths;
        let stem = [
            ConvLayer::new(&mut p, "stem0", config.in_channels, s0, 3, 2, true, he, &mut rng)?,
            ConvLayer::new(&mut p, "stem1", s0, s1, 3, 2, true, he, &mut rng)?,
        ];
        let mut cin = s1;
        let mut stages = Vec::with_capacity(3);
        for (i, &w) in config.widths.iter().enumerate() {
            stages.push(Stage {
                down: ConvLayer::new(&mut p, &format!("stage{i}.down"), cin, w, 3, 2, true, he, &mut rng)?,
                body: ConvLayer::new(&mut p, &format!("stage{i}.body"), w, w, 3, 1, true, he, &mut rng)?,
            });
            cin = w;
        }
        let outs = config.num_classes + 4;
        let mut heads = Vec::with_capacity(3);
        for (i, &w) in config.widths.iter().enumerate() {
            let hidden = ConvLayer::new(&mut p, &format!("head{i}.hidden"), w, config.head_width, 3, 1, true, he, &mut rng)?;
            let out = ConvLayer::new(&mut p, &format!("head{i}.out"), config.head_width, outs, 1, 1, true, Init::Normal(0.01), &mut rng)?;
            let bias = out.bias.expect("head output has a bias");
            for v in &mut p.get_mut(bias).data_mut()[..config.num_classes] {
                *v = T::lit(class_prior_bias());
            }
            heads.push(Head { hidden, out });
        }
        let neck = if with_neck {
            Some(Mstf::new(config.mstf.clone(), &config.widths, &mut p, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            params: p,
            stem,
            stages: stages.try_into().expect("three stages"),
            heads: heads.try_into().expect("three heads"),
            neck,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn neck(&self) -> Option<&Mstf> {
        self.neck.as_ref()
    }

    /// Whether frames interact through the neck at all.
    pub fn is_temporal(&self) -> bool {
        self.neck.as_ref().is_some_and(Mstf::is_active)
    }

    pub fn is_neck_param(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with(NECK_PREFIX)
    }

    pub fn cast<U: Real>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem,
            stages: self.stages,
            heads: self.heads,
            neck: self.neck.clone(),
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let n = self.config.input_size;
        let want = [n, n, self.config.in_channels];
        if image.shape() != want {
            return Err(Error::Shape {
                op: "detector input",
                lhs: want.to_vec(),
                rhs: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn conv_act(&self, layer: &ConvLayer, x: &Tensor<T>) -> Result<(Tensor<T>, ConvAct<T>)> {
        let pre = layer.forward(&self.params, x)?;
        let out = silu_forward(&pre);
        Ok((
            out,
            ConvAct {
                input: x.clone(),
                pre,
            },
        ))
    }

    fn conv_act_backward(&self, layer: &ConvLayer, c: &ConvAct<T>, g: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let gp = silu_backward(&c.pre, g)?;
        layer.backward(&self.params, &c.input, &gp, grads)
    }

    /// One frame: backbone, neck (when `fuse`) and heads. Advances `state`
    /// only when the neck runs.
    fn frame_pass(&self, image: &Tensor<T>, state: &mut FlowState<T>, fuse: bool, keep: bool) -> Result<FramePass<T>> {
        self.check_image(image)?;
        let mut x = image.clone();
        let mut stem = Vec::with_capacity(2);
        for layer in &self.stem {
            let (y, c) = self.conv_act(layer, &x)?;
            stem.push(c);
            x = y;
        }
        let mut stages = Vec::with_capacity(3);
        let mut levels = Vec::with_capacity(3);
        for st in &self.stages {
            let (d, cd) = self.conv_act(&st.down, &x)?;
            let (mut o, cb) = self.conv_act(&st.body, &d)?;
            o.add_assign(&d)?;
            stages.push((cd, cb));
            levels.push(o.clone());
            x = o;
        }
        let (features, neck) = match &self.neck {
            Some(neck) if fuse => {
                let pyramid = FeaturePyramid::new(levels)?;
                let (out, next, cache) = neck.forward(&self.params, state, &pyramid, keep)?;
                *state = next;
                (out.fused.into_levels(), Some(cache))
            }
            _ => (levels, None),
        };
        let mut heads = Vec::with_capacity(3);
        let mut outputs = Vec::with_capacity(3);
        for (head, f) in self.heads.iter().zip(&features) {
            let (h, c) = self.conv_act(&head.hidden, f)?;
            outputs.push(head.out.forward(&self.params, &h)?);
            heads.push(c);
        }
        if !keep {
            stem.clear();
            stages.clear();
            heads.clear();
        }
        Ok(FramePass {
            stem,
            stages,
            neck,
            heads,
            outputs,
        })
    }

    /// Raw head outputs for one frame of a stream, advancing `state`.
    pub fn forward_frame(&self, image: &Tensor<T>, state: &mut FlowState<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.frame_pass(image, state, true, false)?.outputs)
    }

    /// Raw head outputs for consecutive frames of one stream.
    pub fn forward(&self, frames: &[FrameRef<'_, T>], state: &mut FlowState<T>) -> Result<Vec<Vec<Tensor<T>>>> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| f.video_id != first.video_id) {
                return Err(invalid("detector forward: batch mixes frames of different streams"));
            }
            if frames.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
                return Err(invalid("detector forward: frames must be in increasing temporal order"));
            }
        }
        frames.iter().map(|f| self.forward_frame(f.image, state)).collect()
    }

    /// Backward through heads, neck and backbone of one frame. Returns the
    /// gradient for the previous frame's backbone pyramid and for the
    /// incoming flow, when the neck consumed them.
    fn frame_backward(
        &self,
        pass: &FramePass<T>,
        grad_outputs: &[Tensor<T>],
        grad_flow_out: Option<&[Tensor<T>]>,
        grad_features_extra: Option<&[Tensor<T>]>,
        grads: &mut Grads<T>,
    ) -> Result<(Option<Vec<Tensor<T>>>, Option<Vec<Tensor<T>>>)> {
        let mut d_feat = Vec::with_capacity(3);
        for ((head, c), g) in self.heads.iter().zip(&pass.heads).zip(grad_outputs) {
            let h = silu_forward(&c.pre);
            let dh = head.out.backward(&self.params, &h, g, grads)?;
            d_feat.push(self.conv_act_backward(&head.hidden, c, &dh, grads)?);
        }
        let (mut d_levels, d_prev, d_flow) = match (&self.neck, &pass.neck) {
            (Some(neck), Some(cache)) => {
                let sg = neck.backward(&self.params, cache, &d_feat, grad_flow_out, grads)?;
                let flow = (!sg.flow_in.is_empty()).then_some(sg.flow_in);
                (sg.current, sg.previous, flow)
            }
            _ => (d_feat, None, None),
        };
        if let Some(extra) = grad_features_extra {
            for (d, e) in d_levels.iter_mut().zip(extra) {
                d.add_assign(e)?;
            }
        }
        let mut g_next: Option<Tensor<T>> = None;
        for l in (0..3).rev() {
            let st = &self.stages[l];
            let (cd, cb) = &pass.stages[l];
            let mut go = d_levels[l].clone();
            if let Some(g) = g_next.take() {
                go.add_assign(&g)?;
            }
            // o = d + silu(body(d))
            let mut gd = self.conv_act_backward(&st.body, cb, &go, grads)?;
            gd.add_assign(&go)?;
            g_next = Some(self.conv_act_backward(&st.down, cd, &gd, grads)?);
        }
        let mut g = g_next.expect("three stages");
        for (layer, c) in self.stem.iter().zip(&pass.stem).rev() {
            g = self.conv_act_backward(layer, c, &g, grads)?;
        }
        Ok((d_prev, d_flow))
    }

    /// Mean per-frame loss over one clip from a fresh stream state and,
    /// when `grads` is given, its gradient by backpropagation through the
    /// whole clip. With `fuse` off the neck is bypassed.
    pub fn clip_loss(&self, clip: &[Sample], fuse: bool, grads: Option<&mut Grads<T>>) -> Result<LossBreakdown> {
        if clip.is_empty() {
            return Err(invalid("clip_loss: empty clip"));
        }
        let keep = grads.is_some();
        let scale = T::lit(1.0 / clip.len() as f64);
        let mut state = FlowState::new();
        let mut passes = Vec::with_capacity(clip.len());
        let mut grad_outs = Vec::with_capacity(clip.len());
        let mut total = LossBreakdown::default();
        for s in clip {
            let image: Tensor<T> = s.image.cast();
            let pass = self.frame_pass(&image, &mut state, fuse, keep)?;
            let (loss, mut g) = frame_loss(&pass.outputs, &s.boxes, self.config.num_classes)?;
            total.accumulate(&loss);
            if keep {
                g.iter_mut().for_each(|t| t.scale(scale));
                passes.push(pass);
                grad_outs.push(g);
            }
        }
        total.scale(1.0 / clip.len() as f64);
        if let Some(grads) = grads {
            let mut pending: Option<Vec<Tensor<T>>> = None;
            let mut flow: Option<Vec<Tensor<T>>> = None;
            for t in (0..clip.len()).rev() {
                let (d_prev, d_flow) =
                    self.frame_backward(&passes[t], &grad_outs[t], flow.as_deref(), pending.as_deref(), grads)?;
                pending = d_prev;
                flow = d_flow;
            }
        }
        Ok(total)
    }

    /// Checkpoint holding the configuration and every parameter.
    pub fn to_checkpoint(&self, extra: Value) -> Checkpoint {
        let mut meta = json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
            "has_neck": self.neck.is_some(),
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
            m.extend(e);
        }
        let mut c = Checkpoint::new(meta);
        c.push_params(MODEL_PREFIX, &self.params);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta.get("kind").and_then(Value::as_str) != Some(CHECKPOINT_KIND) {
            return Err(Error::Format("checkpoint does not hold a detector".into()));
        }
        let config: DetectorConfig = serde_json::from_value(meta["config"].clone())?;
        let has_neck = meta.get("has_neck").and_then(Value::as_bool).unwrap_or(true);
        let mut model = Self::build(config, 0, has_neck)?;
        ckpt.load_params(MODEL_PREFIX, &mut model.params)?;
        Ok(model)
    }
}

/// Head grid extents of every level for an input of side `size`.
pub fn head_grids(size: usize) -> [(usize, usize); 3] {
    STRIDES.map(|s| (size / s, size / s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledBox;
    use crate::geometry::BBox;
    use crate::mstf::SplitRatio;

    pub(crate) fn tiny_config() -> DetectorConfig {
        let mut c = DetectorConfig {
            input_size: 32,
            stem_widths: [4, 4],
            widths: [8, 8, 8],
            head_width: 8,
            num_classes: 2,
            ..Default::default()
        };
        c.mstf.corr_dim = 4;
        c.mstf.lookup.radii = vec![1, 1, 1];
        c
    }

    fn clip(n: usize, size: usize) -> Vec<Sample> {
        (0..n)
            .map(|t| Sample {
                image: Tensor::from_fn(&[size, size, 1], |i| {
                    let (y, x) = (i / size, i % size);
                    if (x as isize - 8 - 2 * t as isize).abs() < 3 && (y as isize - 10).abs() < 3 {
                        0.9
                    } else {
                        0.2 + 0.01 * ((x * 7 + y * 3) % 5) as f32
                    }
                }),
                boxes: vec![
                    LabeledBox {
                        bbox: BBox::new(5.0 + 2.0 * t as f64, 7.0, 11.0 + 2.0 * t as f64, 13.0),
                        class: Some(0),
                    },
                    LabeledBox {
                        bbox: BBox::new(20.0, 20.0, 30.0, 30.0),
                        class: None,
                    },
                ],
            })
            .collect()
    }

    #[test]
    fn head_grids_follow_strides() {
        let mut c = DetectorConfig::default();
        c.validate().unwrap();
        let m = Detector::<f32>::new(c.clone(), 0).unwrap();
        let img = Tensor::zeros(&[256, 256, 1]);
        let out = m.forward_frame(&img, &mut FlowState::new()).unwrap();
        let shapes: Vec<_> = out.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![32, 32, 8], vec![16, 16, 8], vec![8, 8, 8]]);
        c.input_size = 64;
        assert_eq!(head_grids(64), [(8, 8), (4, 4), (2, 2)]);
    }

    #[test]
    fn parameter_budget_is_desk_scale() {
        let m = Detector::<f32>::without_neck(DetectorConfig::default(), 0).unwrap();
        let n = m.params().num_scalars();
        assert!((250_000..400_000).contains(&n), "{n}");
    }

    #[test]
    fn mixed_streams_rejected() {
        let m = Detector::<f32>::new(tiny_config(), 0).unwrap();
        let img = Tensor::zeros(&[32, 32, 1]);
        let frames = [
            FrameRef { video_id: 1, frame_index: 0, image: &img },
            FrameRef { video_id: 2, frame_index: 1, image: &img },
        ];
        assert!(m.forward(&frames, &mut FlowState::new()).is_err());
        let frames = [
            FrameRef { video_id: 1, frame_index: 1, image: &img },
            FrameRef { video_id: 1, frame_index: 1, image: &img },
        ];
        assert!(m.forward(&frames, &mut FlowState::new()).is_err());
    }

    #[test]
    fn wrong_input_size_rejected() {
        let m = Detector::<f32>::new(tiny_config(), 0).unwrap();
        let img = Tensor::zeros(&[64, 64, 1]);
        assert!(m.forward_frame(&img, &mut FlowState::new()).is_err());
    }

    #[test]
    fn static_split_matches_network_without_neck() {
        let mut c = tiny_config();
        c.mstf.lookup.split_ratio = SplitRatio::new(1, 0);
        let a = Detector::<f64>::new(c.clone(), 3).unwrap();
        let b = Detector::<f64>::without_neck(c, 3).unwrap();
        let frames = clip(3, 32);
        let (mut sa, mut sb) = (FlowState::new(), FlowState::new());
        for f in &frames {
            let img = f.image.cast::<f64>();
            assert_eq!(a.forward_frame(&img, &mut sa).unwrap(), b.forward_frame(&img, &mut sb).unwrap());
        }
    }

    /// Parameter gradients of the clip loss, including backpropagation
    /// through time across the neck, against central differences.
    #[test]
    fn clip_gradient_matches_finite_differences() {
        let mut c = tiny_config();
        c.mstf.lookup.split_ratio = SplitRatio::new(1, 1);
        let mut m = Detector::<f64>::new(c, 5).unwrap();
        // make the zero-initialised motion heads non-trivial
        let ids: Vec<ParamId> = m.params().iter().map(|(id, _, _)| id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &id in &ids {
            if m.params().name(id).contains("motion_head") {
                let shape = m.params().get(id).shape().to_vec();
                *m.params_mut().get_mut(id) = Tensor::randn(&shape, 0.1, &mut rng);
            }
        }
        let frames = clip(3, 32);
        let mut grads = Grads::new(m.params());
        m.clip_loss(&frames, true, Some(&mut grads)).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut checked = 0;
        for &id in &ids {
            let name = m.params().name(id).to_string();
            let len = m.params().get(id).len();
            // a few entries of every tensor
            for k in [0, len / 2, len - 1] {
                let orig = m.params().get(id).data()[k];
                m.params_mut().get_mut(id).data_mut()[k] = orig + h;
                let lp = m.clip_loss(&frames, true, None).unwrap().total;
                m.params_mut().get_mut(id).data_mut()[k] = orig - h;
                let lm = m.clip_loss(&frames, true, None).unwrap().total;
                m.params_mut().get_mut(id).data_mut()[k] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
                assert!(err < 1e-4, "{name}[{k}]: analytic {analytic} numeric {numeric}");
                worst = worst.max(err);
                checked += 1;
            }
        }
        assert!(checked > 50, "{checked}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Detector::<f32>::new(tiny_config(), 1).unwrap();
        let ck = m.to_checkpoint(json!({"epoch": 2}));
        assert_eq!(ck.metadata["epoch"], 2);
        let back = Detector::<f32>::from_checkpoint(&ck).unwrap();
        assert_eq!(back.params().iter().count(), m.params().iter().count());
        for ((_, na, a), (_, nb, b)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
    }
}
