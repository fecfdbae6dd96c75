//! The flow-guided fusion neck: correlation, iterative flow refinement and
//! motion-slice fusion for one frame of a stream.

use rand::Rng;

use super::config::{InterpSource, MstfConfig};
use super::lookup::{lookup, lookup_backward};
use super::state::{FlowState, StepStats};
use crate::correlation::{build_pyramid, build_pyramid_backward, CorrelationPyramid, FeaturePyramid};
use crate::error::{invalid, Error, Result};
use crate::numerics::sample::{avgpool2x, avgpool2x_backward, upsample2x, upsample2x_backward};
use crate::numerics::{
    gru_cell_backward, gru_cell_cached, ConvLayer, GruCache, GruParams, Grads, Init, ParamId,
    ParamStore, Real, Tensor,
};

#[derive(Debug, Clone, Copy)]
struct GruIds {
    wz: ParamId,
    bz: ParamId,
    wr: ParamId,
    br: ParamId,
    wh: ParamId,
    bh: ParamId,
}

impl GruIds {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        input: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [hidden, kernel, kernel, hidden + input];
        let std = 1.0 / ((kernel * kernel * (hidden + input)) as f64).sqrt();
        let mut w = |store: &mut ParamStore<T>, g: &str| {
            store.add(format!("{name}.w{g}"), Tensor::randn(&shape, std, rng))
        };
        let wz = w(store, "z")?;
        let wr = w(store, "r")?;
        let wh = w(store, "h")?;
        let mut b = |g: &str| store.add(format!("{name}.b{g}"), Tensor::zeros(&[hidden]));
        Ok(Self {
            wz,
            bz: b("z")?,
            wr,
            br: b("r")?,
            wh,
            bh: b("h")?,
        })
    }

    fn params<T: Real>(&self, store: &ParamStore<T>) -> GruParams<T> {
        GruParams {
            wz: store.get(self.wz).clone(),
            bz: store.get(self.bz).clone(),
            wr: store.get(self.wr).clone(),
            br: store.get(self.br).clone(),
            wh: store.get(self.wh).clone(),
            bh: store.get(self.bh).clone(),
        }
    }

    fn accumulate<T: Real>(&self, grads: &mut Grads<T>, g: &GruParams<T>) -> Result<()> {
        grads.accumulate(self.wz, &g.wz)?;
        grads.accumulate(self.bz, &g.bz)?;
        grads.accumulate(self.wr, &g.wr)?;
        grads.accumulate(self.br, &g.br)?;
        grads.accumulate(self.wh, &g.wh)?;
        grads.accumulate(self.bh, &g.bh)
    }
}

#[derive(Debug, Clone)]
struct LevelBlock {
    gru: GruIds,
    flow_head: ConvLayer,
    motion_head: ConvLayer,
    interp_from: Option<usize>,
    lookup_channels: usize,
    interp_channels: usize,
}

/// Parameter layout and configuration of the fusion neck.
#[derive(Debug, Clone)]
pub struct Mstf {
    config: MstfConfig,
    channels: Vec<usize>,
    motion: Vec<usize>,
    projections: Vec<ConvLayer>,
    blocks: Vec<Option<LevelBlock>>,
}

/// Flow increment produced by one recurrent update.
#[derive(Debug, Clone)]
pub struct FlowUpdate<T> {
    pub iteration: usize,
    pub level: usize,
    pub delta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// Fused pyramid, same shapes as the input pyramid.
    pub fused: FeaturePyramid<T>,
    pub stats: StepStats,
    pub flow_updates: Vec<FlowUpdate<T>>,
}

#[derive(Debug, Clone)]
struct LevelIter<T> {
    level: usize,
    flow_before: Tensor<T>,
    interp_source_shape: Option<Vec<usize>>,
    gru: GruCache<T>,
    h_new: Tensor<T>,
}

#[derive(Debug, Clone)]
struct FullCache<T> {
    current: FeaturePyramid<T>,
    previous: FeaturePyramid<T>,
    proj_current: FeaturePyramid<T>,
    proj_previous: FeaturePyramid<T>,
    pyramid: CorrelationPyramid<T>,
    iterations: Vec<Vec<LevelIter<T>>>,
    final_hidden: Vec<Option<Tensor<T>>>,
}

/// Intermediate values of one step, needed by [`Mstf::backward`].
#[derive(Debug, Clone)]
pub struct StepCache<T> {
    full: Option<Box<FullCache<T>>>,
}

impl<T> StepCache<T> {
    /// Whether the step was an identity pass-through.
    pub fn is_pass_through(&self) -> bool {
        self.full.is_none()
    }
}

/// Gradients of one step with respect to its inputs.
#[derive(Debug, Clone)]
pub struct StepGrads<T> {
    pub current: Vec<Tensor<T>>,
    /// `None` when the step had no previous frame.
    pub previous: Option<Vec<Tensor<T>>>,
    /// Gradient with respect to the incoming flow; empty for pass-through steps.
    pub flow_in: Vec<Tensor<T>>,
}

impl Mstf {
    /// Register the neck's parameters for a pyramid with `channels[l]`
    /// channels at level `l`. A static-only split registers nothing.
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: MstfConfig,
        channels: &[usize],
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let n = channels.len();
        config.validate(n)?;
        let motion = channels
            .iter()
            .map(|&c| config.lookup.split_ratio.motion_channels(c))
            .collect::<Result<Vec<_>>>()?;
        let levels = config.flow_level_indices();
        let mut me = Self {
            channels: channels.to_vec(),
            motion,
            projections: Vec::new(),
            blocks: vec![None; n],
            config,
        };
        if me.config.lookup.split_ratio.is_static_only() || levels.is_empty() {
            return Ok(me);
        }
        let cfg = &me.config;
        let lookup_channels: Vec<usize> = (0..n)
            .map(|l| {
                (0..n)
                    .filter(|&k| cfg.correlation.pairs.contains(l, k))
                    .map(|k| cfg.lookup.window(k))
                    .sum()
            })
            .collect();
        for (l, &c) in channels.iter().enumerate() {
            me.projections.push(ConvLayer::new(
                store,
                &format!("mstf.proj{l}"),
                c,
                cfg.corr_dim,
                1,
                1,
                false,
                Init::Kaiming(std::f64::consts::FRAC_1_SQRT_2),
                rng,
            )?);
        }
        for &l in &levels {
            let interp_from = match cfg.interp_source {
                InterpSource::Coarser => Some(l + 1).filter(|s| levels.contains(s)),
                InterpSource::Finer => l.checked_sub(1).filter(|s| levels.contains(s)),
            };
            let interp_channels = interp_from.map_or(0, |s| lookup_channels[s]);
            let m = me.motion[l];
            let x = lookup_channels[l] + interp_channels + 2;
            let name = format!("mstf.l{l}");
            let gru = GruIds::new(store, &format!("{name}.gru"), m, x, cfg.gru_kernel, rng)?;
            let flow_head = ConvLayer::new(
                store,
                &format!("{name}.flow_head"),
                m,
                2,
                cfg.head_kernel,
                1,
                true,
                Init::Normal(1e-3),
                rng,
            )?;
            let motion_head = ConvLayer::new(
                store,
                &format!("{name}.motion_head"),
                m,
                m,
                cfg.head_kernel,
                1,
                true,
                Init::Zeros,
                rng,
            )?;
            me.blocks[l] = Some(LevelBlock {
                gru,
                flow_head,
                motion_head,
                interp_from,
                lookup_channels: lookup_channels[l],
                interp_channels,
            });
        }
        Ok(me)
    }

    pub fn config(&self) -> &MstfConfig {
        &self.config
    }

    /// Whether any level is fused; `false` means every step is an identity.
    pub fn is_active(&self) -> bool {
        self.blocks.iter().any(Option::is_some)
    }

    pub fn motion_channels(&self) -> &[usize] {
        &self.motion
    }

    /// Fused levels, coarse to fine.
    fn order(&self) -> Vec<usize> {
        (0..self.blocks.len()).rev().filter(|&l| self.blocks[l].is_some()).collect()
    }

    fn check_input<T: Real>(&self, state: &FlowState<T>, current: &FeaturePyramid<T>) -> Result<()> {
        if current.num_levels() != self.channels.len() {
            return Err(invalid(format!(
                "fusion step: pyramid has {} levels, expected {}",
                current.num_levels(),
                self.channels.len()
            )));
        }
        for (l, (t, &c)) in current.levels().iter().zip(&self.channels).enumerate() {
            let (_, _, tc) = t.hwc()?;
            if tc != c {
                return Err(invalid(format!("fusion step: level {l} has {tc} channels, expected {c}")));
            }
        }
        if let Some(prev) = state.previous() {
            if prev.shapes() != current.shapes() {
                return Err(invalid(format!(
                    "fusion step: frame shapes {:?} differ from previous frame {:?}; reset the state between streams",
                    current.shapes(),
                    prev.shapes()
                )));
            }
        }
        Ok(())
    }

    fn interp<T: Real>(&self, source: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        let out = match self.config.interp_source {
            InterpSource::Coarser => upsample2x(source, self.config.interp_mode)?,
            InterpSource::Finer => avgpool2x(source)?,
        };
        let (h, w, _) = target.hwc()?;
        let (oh, ow, _) = out.hwc()?;
        if (oh, ow) != (h, w) {
            return Err(invalid(format!(
                "cross-scale term is {oh}x{ow} but level is {h}x{w}; level extents must be even"
            )));
        }
        Ok(out)
    }

    /// Streaming step: fuse `current` and advance `state` in place.
    pub fn step<T: Real>(
        &self,
        store: &ParamStore<T>,
        state: &mut FlowState<T>,
        current: &FeaturePyramid<T>,
    ) -> Result<StepOutput<T>> {
        let (out, next, _) = self.forward(store, state, current, false)?;
        *state = next;
        Ok(out)
    }

    /// Functional step returning the fused pyramid, the next state and
    /// (when `keep_cache`) everything needed for the backward pass.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        state: &FlowState<T>,
        current: &FeaturePyramid<T>,
        keep_cache: bool,
    ) -> Result<(StepOutput<T>, FlowState<T>, StepCache<T>)> {
        self.check_input(state, current)?;
        let n = self.channels.len();
        let mut next = state.clone();
        let prev = match state.previous() {
            Some(p) if self.is_active() => p.clone(),
            _ => {
                let flows = if self.is_active() {
                    current
                        .levels()
                        .iter()
                        .map(|t| t.hwc().map(|(h, w, _)| Tensor::zeros(&[h, w, 2])))
                        .collect::<Result<_>>()?
                } else {
                    Vec::new()
                };
                next.advance(flows, current.clone());
                let out = StepOutput {
                    fused: current.clone(),
                    stats: StepStats::default(),
                    flow_updates: Vec::new(),
                };
                return Ok((out, next, StepCache { full: None }));
            }
        };

        let cfg = &self.config;
        let project = |p: &FeaturePyramid<T>| -> Result<FeaturePyramid<T>> {
            FeaturePyramid::new(
                self.projections
                    .iter()
                    .zip(p.levels())
                    .map(|(layer, t)| layer.forward(store, t))
                    .collect::<Result<_>>()?,
            )
        };
        let proj_current = project(current)?;
        let proj_previous = project(&prev)?;
        let pyramid = build_pyramid(&proj_current, &proj_previous, &cfg.correlation)?;
        let mut stats = StepStats {
            correlation_elements: pyramid.total_elements(),
            ..StepStats::default()
        };

        let mut flows: Vec<Tensor<T>> = (0..n)
            .map(|l| state.flow_or_zero(l, current.level(l)))
            .collect::<Result<_>>()?;
        let mut hidden: Vec<Option<Tensor<T>>> = (0..n)
            .map(|l| {
                self.blocks[l]
                    .as_ref()
                    .map(|_| {
                        let c = self.channels[l];
                        current.level(l).channel_slice(c - self.motion[l], c)
                    })
                    .transpose()
            })
            .collect::<Result<_>>()?;

        let order = self.order();
        let mut updates = Vec::new();
        let mut iterations = Vec::new();
        for it in 0..cfg.lookup.flow_iterations {
            // every lookup of an iteration sees the flow from its start
            let mut fmaps: Vec<Option<Tensor<T>>> = vec![None; n];
            for &l in &order {
                fmaps[l] = Some(lookup(&pyramid, l, &flows[l], &cfg.lookup.radii)?);
                stats.lookups += 1;
            }
            let mut entries = Vec::new();
            for &l in &order {
                let block = self.blocks[l].as_ref().expect("ordered levels have blocks");
                let f = fmaps[l].as_ref().expect("looked up above");
                let interp = match block.interp_from {
                    Some(s) => {
                        let src = fmaps[s].as_ref().expect("source level is fused");
                        Some((self.interp(src, f)?, src.shape().to_vec()))
                    }
                    None => None,
                };
                let mut parts = vec![f];
                if let Some((t, _)) = &interp {
                    parts.push(t);
                }
                parts.push(&flows[l]);
                let x = Tensor::concat_channels(&parts)?;
                let gp = block.gru.params(store);
                let h = hidden[l].as_ref().expect("fused level has hidden state");
                let (h_new, gru) = gru_cell_cached(h, &x, &gp)?;
                let delta = block.flow_head.forward(store, &h_new)?;
                let flow_before = if keep_cache { Some(flows[l].clone()) } else { None };
                flows[l].add_assign(&delta)?;
                if !flows[l].all_finite() {
                    return Err(Error::NonFinite(format!("flow at level {l}")));
                }
                stats.updates += 1;
                updates.push(FlowUpdate {
                    iteration: it,
                    level: l,
                    delta,
                });
                if let Some(flow_before) = flow_before {
                    entries.push(LevelIter {
                        level: l,
                        flow_before,
                        interp_source_shape: interp.map(|(_, s)| s),
                        gru,
                        h_new: h_new.clone(),
                    });
                }
                hidden[l] = Some(h_new);
            }
            iterations.push(entries);
        }

        let mut fused = Vec::with_capacity(n);
        for l in 0..n {
            let g = current.level(l);
            let Some(block) = &self.blocks[l] else {
                fused.push(g.clone());
                continue;
            };
            let c = self.channels[l];
            let m = self.motion[l];
            let h = hidden[l].as_ref().expect("fused level has hidden state");
            let mut motion_out = block.motion_head.forward(store, h)?;
            motion_out.add_assign(&g.channel_slice(c - m, c)?)?;
            let stat = g.channel_slice(0, c - m)?;
            fused.push(Tensor::concat_channels(&[&stat, &motion_out])?);
        }
        let fused = FeaturePyramid::new(fused)?;
        next.advance(flows, current.clone());

        let cache = if keep_cache {
            StepCache {
                full: Some(Box::new(FullCache {
                    current: current.clone(),
                    previous: prev,
                    proj_current,
                    proj_previous,
                    pyramid,
                    iterations,
                    final_hidden: hidden,
                })),
            }
        } else {
            StepCache { full: None }
        };
        Ok((
            StepOutput {
                fused,
                stats,
                flow_updates: updates,
            },
            next,
            cache,
        ))
    }

    /// Backpropagate through one step. `grad_flow_out` is the gradient with
    /// respect to the outgoing flow (from the next frame), if any.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &StepCache<T>,
        grad_fused: &[Tensor<T>],
        grad_flow_out: Option<&[Tensor<T>]>,
        grads: &mut Grads<T>,
    ) -> Result<StepGrads<T>> {
        let Some(fc) = cache.full.as_deref() else {
            return Ok(StepGrads {
                current: grad_fused.to_vec(),
                previous: None,
                flow_in: Vec::new(),
            });
        };
        let n = self.channels.len();
        if grad_fused.len() != n {
            return Err(invalid(format!("fusion backward: {} gradients for {n} levels", grad_fused.len())));
        }
        let cfg = &self.config;
        let mut d_cur: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut d_hidden: Vec<Option<Tensor<T>>> = vec![None; n];
        for l in 0..n {
            let g = &grad_fused[l];
            fc.current.level(l).same_shape("fusion backward", g)?;
            d_cur.push(g.clone());
            if let Some(block) = &self.blocks[l] {
                let c = self.channels[l];
                let gm = g.channel_slice(c - self.motion[l], c)?;
                let h = fc.final_hidden[l].as_ref().expect("fused level has hidden state");
                d_hidden[l] = Some(block.motion_head.backward(store, h, &gm, grads)?);
            }
        }
        let mut d_flows: Vec<Tensor<T>> = match grad_flow_out {
            Some(g) if !g.is_empty() => g.to_vec(),
            _ => fc
                .current
                .levels()
                .iter()
                .map(|t| t.hwc().map(|(h, w, _)| Tensor::zeros(&[h, w, 2])))
                .collect::<Result<_>>()?,
        };
        let mut d_pyr = fc.pyramid.zeros_like();

        for entries in fc.iterations.iter().rev() {
            let mut d_f: Vec<Option<Tensor<T>>> = vec![None; n];
            for e in entries.iter().rev() {
                let l = e.level;
                let block = self.blocks[l].as_ref().expect("cached level has a block");
                let mut dh = block.flow_head.backward(store, &e.h_new, &d_flows[l], grads)?;
                dh.add_assign(d_hidden[l].as_ref().expect("hidden gradient seeded"))?;
                let gp = block.gru.params(store);
                let gg = gru_cell_backward(&e.gru, &gp, &dh)?;
                block.gru.accumulate(grads, &gg.params)?;
                d_hidden[l] = Some(gg.hidden);

                let fcn = block.lookup_channels;
                let icn = block.interp_channels;
                let df = gg.input.channel_slice(0, fcn)?;
                if let (Some(src), Some(shape)) = (block.interp_from, &e.interp_source_shape) {
                    let di = gg.input.channel_slice(fcn, fcn + icn)?;
                    let back = match cfg.interp_source {
                        InterpSource::Coarser => upsample2x_backward(shape, &di, cfg.interp_mode)?,
                        InterpSource::Finer => avgpool2x_backward(shape, &di)?,
                    };
                    match &mut d_f[src] {
                        Some(acc) => acc.add_assign(&back)?,
                        slot => *slot = Some(back),
                    }
                }
                let dphi = gg.input.channel_slice(fcn + icn, fcn + icn + 2)?;
                d_flows[l].add_assign(&dphi)?;
                match &mut d_f[l] {
                    Some(acc) => acc.add_assign(&df)?,
                    slot => *slot = Some(df),
                }
            }
            for e in entries {
                let l = e.level;
                let df = d_f[l].take().expect("every fused level has a lookup gradient");
                let dlook = lookup_backward(&fc.pyramid, l, &e.flow_before, &cfg.lookup.radii, &df, Some(&mut d_pyr))?;
                d_flows[l].add_assign(&dlook)?;
            }
        }

        for l in 0..n {
            if let Some(dh) = &d_hidden[l] {
                let c = self.channels[l];
                d_cur[l].add_into_channels(c - self.motion[l], dh)?;
            }
        }
        let (dpc, dpp) =
            build_pyramid_backward(&fc.proj_current, &fc.proj_previous, &d_pyr, &cfg.correlation)?;
        let mut d_prev = Vec::with_capacity(n);
        for l in 0..n {
            let layer = &self.projections[l];
            let gc = layer.backward(store, fc.current.level(l), &dpc[l], grads)?;
            d_cur[l].add_assign(&gc)?;
            d_prev.push(layer.backward(store, fc.previous.level(l), &dpp[l], grads)?);
        }
        Ok(StepGrads {
            current: d_cur,
            previous: Some(d_prev),
            flow_in: d_flows,
        })
    }
}
