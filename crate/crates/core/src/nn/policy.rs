use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ConvGeom, NnError, ParamGroup, ParamSet, Scalar, Tape, Tensor, Var};

/// Width of the compass encoding `(d, cos θ, sin θ)`.
pub const COMPASS_WIDTH: usize = 3;

/// Architecture of the recurrent policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Side of the square observation.
    pub resolution: usize,
    /// 1 for depth, 3 for RGB.
    pub in_channels: usize,
    pub stem_block: usize,
    /// Output channels of each residual stage; stages after the first halve
    /// the spatial size.
    pub stages: Vec<usize>,
    pub se_reduction: usize,
    /// Width of the visual embedding fed to the recurrent core.
    pub embed: usize,
    pub hidden: usize,
    pub actions: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            in_channels: 1,
            stem_block: 2,
            stages: vec![32, 64, 128, 256],
            se_reduction: 16,
            embed: 256,
            hidden: 128,
            actions: 4,
        }
    }
}

impl PolicyConfig {
    /// Every violated constraint, in a stable order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.resolution == 0 {
            p.push("policy.resolution must be positive".into());
        }
        if !matches!(self.in_channels, 1 | 3) {
            p.push(format!(
                "policy.in_channels must be 1 (depth) or 3 (rgb), got {}",
                self.in_channels
            ));
        }
        if self.stem_block == 0 {
            p.push("policy.stem_block must be positive".into());
        }
        if self.stages.is_empty() {
            p.push("policy.stages must list at least one stage".into());
        }
        if self.se_reduction == 0 {
            p.push("policy.se_reduction must be positive".into());
        } else {
            for (i, &c) in self.stages.iter().enumerate() {
                if c == 0 || c % self.se_reduction != 0 {
                    p.push(format!(
                        "policy.stages[{i}] = {c} is not a positive multiple of se_reduction {}",
                        self.se_reduction
                    ));
                }
            }
        }
        if self.stem_block > 0 && !self.stages.is_empty() {
            let div = self.stem_block << (self.stages.len() - 1);
            if !self.resolution.is_multiple_of(div) {
                p.push(format!(
                    "policy.resolution {} must be divisible by {div} (stem block times the stage downsampling)",
                    self.resolution
                ));
            }
        }
        if self.embed == 0 {
            p.push("policy.embed must be positive".into());
        }
        if self.hidden == 0 {
            p.push("policy.hidden must be positive".into());
        }
        if self.actions == 0 {
            p.push("policy.actions must be positive".into());
        }
        p
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(NnError::Config(p.join("; ")))
        }
    }

    /// Spatial side of the final stage.
    pub fn final_side(&self) -> usize {
        self.resolution / self.stem_block / (1 << (self.stages.len().max(1) - 1))
    }

    pub fn obs_len(&self) -> usize {
        self.in_channels * self.resolution * self.resolution
    }
}

#[derive(Debug, Clone)]
struct BlockParams {
    geom1: ConvGeom,
    geom2: ConvGeom,
    proj: Option<(usize, ConvGeom)>,
    bias1: usize,
    conv1: usize,
    bias2: usize,
    bias3: usize,
    conv2: usize,
    se1_w: usize,
    se1_b: usize,
    se2_w: usize,
    se2_b: usize,
    scale: usize,
    bias4: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stem_geom: ConvGeom,
    stem_w: usize,
    stem_b: usize,
    blocks: Vec<BlockParams>,
    embed_w: usize,
    embed_b: usize,
    lstm_w: usize,
    lstm_b: usize,
    pi_w: usize,
    pi_b: usize,
    v_w: usize,
    v_b: usize,
}

/// Recurrent state `(h, c)`, each `[N, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> RecurrentState<T> {
    pub fn zeros(n: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[n, hidden]),
            c: Tensor::zeros(&[n, hidden]),
        }
    }

    pub fn len(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, start: usize, count: usize) -> Self {
        Self {
            h: self.h.rows(start, count),
            c: self.c.rows(start, count),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyOutput<T> {
    /// `[N, actions]`
    pub logits: Tensor<T>,
    /// `[N]`
    pub value: Vec<T>,
    pub state: RecurrentState<T>,
}

/// `steps × envs` frames in time-major order (row `t·envs + e`).
pub struct SequenceInput<'a, T> {
    pub obs: &'a Tensor<T>,
    pub compass: &'a Tensor<T>,
    /// True where an episode begins at that frame; the recurrent state is
    /// zeroed before the step.
    pub starts: &'a [bool],
    pub initial: &'a RecurrentState<T>,
    pub steps: usize,
}

/// Vars produced by [`Policy::record`].
#[derive(Debug, Clone, Copy)]
pub struct Recorded {
    /// `[steps·envs, actions]`
    pub logits: Var,
    /// `[steps·envs, 1]`
    pub values: Var,
    pub h: Var,
    pub c: Var,
}

/// SpaceToDepth stem, SE residual stages with Fixup initialization, a
/// single-layer LSTM, and linear action and value heads.
#[derive(Debug, Clone)]
pub struct Policy<T> {
    cfg: PolicyConfig,
    params: ParamSet<T>,
    layout: Layout,
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Encodes a compass reading for the network input.
pub fn encode_compass(distance: f64, bearing: f64) -> [f64; COMPASS_WIDTH] {
    [distance, bearing.cos(), bearing.sin()]
}

impl<T: Scalar> Policy<T> {
    pub fn new(cfg: &PolicyConfig, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::<T>::default();
        let add = |ps: &mut ParamSet<T>, name: String, shape: &[usize], vals: Vec<f64>, g: ParamGroup| {
            let t = Tensor::from_vec(shape, vals.into_iter().map(T::of).collect()).expect("init shape");
            ps.push(name, t, g)
        };
        let scalar =
            |ps: &mut ParamSet<T>, name: String, v: f64| ps.push(name, Tensor::scalar(T::of(v)), ParamGroup::NoTrust);

        let side0 = cfg.resolution / cfg.stem_block;
        let stem_in = cfg.in_channels * cfg.stem_block * cfg.stem_block;
        let stem_geom = ConvGeom::new(stem_in, side0, side0, cfg.stages[0], 3, 1, 1)?;
        let fan = stem_geom.patch() as f64;
        let stem_w = add(
            &mut ps,
            "stem.weight".into(),
            &[cfg.stages[0], stem_geom.patch()],
            normal(&mut rng, cfg.stages[0] * stem_geom.patch(), (2.0 / fan).sqrt()),
            ParamGroup::Default,
        );
        let stem_b = scalar(&mut ps, "stem.bias".into(), 0.0);

        let m = cfg.stages.len() as f64;
        let mut blocks = Vec::new();
        let (mut cin, mut side) = (cfg.stages[0], side0);
        for (s, &cout) in cfg.stages.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let geom1 = ConvGeom::new(cin, side, side, cout, 3, stride, 1)?;
            let geom2 = ConvGeom::new(cout, geom1.out_h, geom1.out_w, cout, 3, 1, 1)?;
            let p = format!("block{s}");
            let bias1 = scalar(&mut ps, format!("{p}.bias1"), 0.0);
            let std1 = (2.0 / geom1.patch() as f64).sqrt() * m.powf(-0.5);
            let conv1 = add(
                &mut ps,
                format!("{p}.conv1.weight"),
                &[cout, geom1.patch()],
                normal(&mut rng, cout * geom1.patch(), std1),
                ParamGroup::Default,
            );
            let bias2 = scalar(&mut ps, format!("{p}.bias2"), 0.0);
            let bias3 = scalar(&mut ps, format!("{p}.bias3"), 0.0);
            let conv2 = add(
                &mut ps,
                format!("{p}.conv2.weight"),
                &[cout, geom2.patch()],
                normal(&mut rng, cout * geom2.patch(), (2.0 / geom2.patch() as f64).sqrt()),
                ParamGroup::Default,
            );
            let red = cout / cfg.se_reduction;
            let se1_w = add(
                &mut ps,
                format!("{p}.se.fc1.weight"),
                &[red, cout],
                normal(&mut rng, red * cout, (2.0 / cout as f64).sqrt()),
                ParamGroup::Default,
            );
            let se1_b = add(
                &mut ps,
                format!("{p}.se.fc1.bias"),
                &[red],
                vec![0.0; red],
                ParamGroup::NoTrust,
            );
            let se2_w = add(
                &mut ps,
                format!("{p}.se.fc2.weight"),
                &[cout, red],
                normal(&mut rng, cout * red, (1.0 / red as f64).sqrt()),
                ParamGroup::Default,
            );
            let se2_b = add(
                &mut ps,
                format!("{p}.se.fc2.bias"),
                &[cout],
                vec![0.0; cout],
                ParamGroup::NoTrust,
            );
            let scale = scalar(&mut ps, format!("{p}.scale"), 0.0);
            let bias4 = scalar(&mut ps, format!("{p}.bias4"), 0.0);
            let proj = if stride != 1 || cin != cout {
                let g = ConvGeom::new(cin, side, side, cout, 1, stride, 0)?;
                let w = add(
                    &mut ps,
                    format!("{p}.proj.weight"),
                    &[cout, cin],
                    normal(&mut rng, cout * cin, (1.0 / cin as f64).sqrt()),
                    ParamGroup::Default,
                );
                Some((w, g))
            } else {
                None
            };
            blocks.push(BlockParams {
                geom1,
                geom2,
                proj,
                bias1,
                conv1,
                bias2,
                bias3,
                conv2,
                se1_w,
                se1_b,
                se2_w,
                se2_b,
                scale,
                bias4,
            });
            cin = cout;
            side = geom1.out_h;
        }

        let flat = cin * side * side;
        let embed_w = add(
            &mut ps,
            "embed.weight".into(),
            &[cfg.embed, flat],
            normal(&mut rng, cfg.embed * flat, (2.0 / flat as f64).sqrt()),
            ParamGroup::Default,
        );
        let embed_b = add(
            &mut ps,
            "embed.bias".into(),
            &[cfg.embed],
            vec![0.0; cfg.embed],
            ParamGroup::NoTrust,
        );
        let (h, lin) = (cfg.hidden, cfg.embed + COMPASS_WIDTH + cfg.hidden);
        let bound = 1.0 / (h as f64).sqrt();
        let lstm_vals = (0..4 * h * lin).map(|_| rng.gen_range(-bound..bound)).collect();
        let lstm_w = add(
            &mut ps,
            "lstm.weight".into(),
            &[4 * h, lin],
            lstm_vals,
            ParamGroup::Default,
        );
        // gate order i, f, g, o; forget gate biased open
        let lstm_bias = (0..4 * h)
            .map(|k| if (h..2 * h).contains(&k) { 1.0 } else { 0.0 })
            .collect();
        let lstm_b = add(&mut ps, "lstm.bias".into(), &[4 * h], lstm_bias, ParamGroup::NoTrust);
        let pi_w = add(
            &mut ps,
            "policy.weight".into(),
            &[cfg.actions, h],
            normal(&mut rng, cfg.actions * h, 0.01),
            ParamGroup::Default,
        );
        let pi_b = add(
            &mut ps,
            "policy.bias".into(),
            &[cfg.actions],
            vec![0.0; cfg.actions],
            ParamGroup::NoTrust,
        );
        let v_w = add(
            &mut ps,
            "value.weight".into(),
            &[1, h],
            normal(&mut rng, h, bound),
            ParamGroup::Default,
        );
        let v_b = add(&mut ps, "value.bias".into(), &[1], vec![0.0], ParamGroup::NoTrust);

        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            layout: Layout {
                stem_geom,
                stem_w,
                stem_b,
                blocks,
                embed_w,
                embed_b,
                lstm_w,
                lstm_b,
                pi_w,
                pi_b,
                v_w,
                v_b,
            },
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> Policy<U> {
        Policy {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn block(&self, tape: &mut Tape<'_, T>, b: &BlockParams, x: Var, ablate: bool) -> Result<Var, NnError> {
        let shortcut = match b.proj {
            Some((w, g)) => {
                let w = tape.param(w);
                tape.conv2d(x, w, g)?
            }
            None => x,
        };
        if ablate {
            return Ok(shortcut);
        }
        let mut y = {
            let s = tape.param(b.bias1);
            tape.add_scalar(x, s)?
        };
        y = tape.relu(y);
        let w1 = tape.param(b.conv1);
        y = tape.conv2d(y, w1, b.geom1)?;
        let s2 = tape.param(b.bias2);
        y = tape.add_scalar(y, s2)?;
        y = tape.relu(y);
        let s3 = tape.param(b.bias3);
        y = tape.add_scalar(y, s3)?;
        let w2 = tape.param(b.conv2);
        y = tape.conv2d(y, w2, b.geom2)?;
        y = self.squeeze_excite(tape, b, y)?;
        let scale = tape.param(b.scale);
        y = tape.mul_scalar(y, scale)?;
        let s4 = tape.param(b.bias4);
        y = tape.add_scalar(y, s4)?;
        tape.add(shortcut, y)
    }

    fn squeeze_excite(&self, tape: &mut Tape<'_, T>, b: &BlockParams, x: Var) -> Result<Var, NnError> {
        let z = tape.spatial_mean(x)?;
        let (w1, b1, w2, b2) = (
            tape.param(b.se1_w),
            tape.param(b.se1_b),
            tape.param(b.se2_w),
            tape.param(b.se2_b),
        );
        let z = tape.matmul(z, w1, true)?;
        let z = tape.add_row_bias(z, b1)?;
        let z = tape.relu(z);
        let z = tape.matmul(z, w2, true)?;
        let z = tape.add_row_bias(z, b2)?;
        let gate = tape.sigmoid(z);
        tape.channel_scale(x, gate)
    }

    /// Visual embedding `[frames, embed]` of `obs: [frames, C, H, W]`.
    fn encode(&self, tape: &mut Tape<'_, T>, obs: Var, ablate: bool) -> Result<Var, NnError> {
        let l = &self.layout;
        let frames = tape.shape(obs)[0];
        let mut x = tape.space_to_depth(obs, self.cfg.stem_block)?;
        let w = tape.param(l.stem_w);
        x = tape.conv2d(x, w, l.stem_geom)?;
        let b = tape.param(l.stem_b);
        x = tape.add_scalar(x, b)?;
        x = tape.relu(x);
        for blk in &l.blocks {
            x = self.block(tape, blk, x, ablate)?;
        }
        x = tape.relu(x);
        let flat = tape.value(x).len() / frames.max(1);
        x = tape.reshape(x, &[frames, flat])?;
        let (ew, eb) = (tape.param(l.embed_w), tape.param(l.embed_b));
        x = tape.matmul(x, ew, true)?;
        x = tape.add_row_bias(x, eb)?;
        Ok(tape.relu(x))
    }

    /// Records the policy over a time-major sequence on `tape`, which must
    /// have been created over this policy's parameters.
    pub fn record(
        &self,
        tape: &mut Tape<'_, T>,
        input: &SequenceInput<'_, T>,
        ablate: bool,
    ) -> Result<Recorded, NnError> {
        let cfg = &self.cfg;
        let envs = input.initial.len();
        let frames = input.steps * envs;
        let obs_shape = [frames, cfg.in_channels, cfg.resolution, cfg.resolution];
        if input.obs.shape() != obs_shape {
            return Err(NnError::Shape(format!(
                "observations {:?}, expected {obs_shape:?}",
                input.obs.shape()
            )));
        }
        if input.compass.shape() != [frames, COMPASS_WIDTH] {
            return Err(NnError::Shape(format!(
                "compass {:?}, expected [{frames}, {COMPASS_WIDTH}]",
                input.compass.shape()
            )));
        }
        if input.starts.len() != frames {
            return Err(NnError::Shape(format!(
                "{} episode-start flags for {frames} frames",
                input.starts.len()
            )));
        }
        if input.initial.h.shape() != [envs, cfg.hidden] || input.initial.c.shape() != [envs, cfg.hidden] {
            return Err(NnError::Shape(format!(
                "recurrent state must be [{envs}, {}]",
                cfg.hidden
            )));
        }
        let l = &self.layout;
        let obs = tape.input(input.obs.clone());
        let emb = self.encode(tape, obs, ablate)?;
        let compass = tape.input(input.compass.clone());
        let feat = tape.concat_cols(emb, compass)?;
        let mut h = tape.input(input.initial.h.clone());
        let mut c = tape.input(input.initial.c.clone());
        let (lw, lb) = (tape.param(l.lstm_w), tape.param(l.lstm_b));
        let hd = cfg.hidden;
        let mut outs = Vec::with_capacity(input.steps);
        for t in 0..input.steps {
            let keep: Vec<bool> = input.starts[t * envs..(t + 1) * envs].iter().map(|&s| !s).collect();
            let hp = tape.row_mask(h, &keep)?;
            let cp = tape.row_mask(c, &keep)?;
            let xt = tape.slice_rows(feat, t * envs, envs)?;
            let z = tape.concat_cols(xt, hp)?;
            let z = tape.matmul(z, lw, true)?;
            let z = tape.add_row_bias(z, lb)?;
            let i = tape.slice_cols(z, 0, hd)?;
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(z, hd, hd)?;
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(z, 2 * hd, hd)?;
            let g = tape.tanh(g);
            let o = tape.slice_cols(z, 3 * hd, hd)?;
            let o = tape.sigmoid(o);
            let fc = tape.mul(f, cp)?;
            let ig = tape.mul(i, g)?;
            c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
            outs.push(h);
        }
        let hs = tape.concat_rows(&outs)?;
        let (pw, pb, vw, vb) = (
            tape.param(l.pi_w),
            tape.param(l.pi_b),
            tape.param(l.v_w),
            tape.param(l.v_b),
        );
        let logits = tape.matmul(hs, pw, true)?;
        let logits = tape.add_row_bias(logits, pb)?;
        let values = tape.matmul(hs, vw, true)?;
        let values = tape.add_row_bias(values, vb)?;
        Ok(Recorded { logits, values, h, c })
    }

    fn forward_impl(
        &self,
        obs: &Tensor<T>,
        compass: &Tensor<T>,
        state: &RecurrentState<T>,
        starts: &[bool],
        ablate: bool,
    ) -> Result<PolicyOutput<T>, NnError> {
        let mut tape = Tape::new(&self.params);
        let input = SequenceInput {
            obs,
            compass,
            starts,
            initial: state,
            steps: 1,
        };
        let r = self.record(&mut tape, &input, ablate)?;
        let logits = tape.value(r.logits).clone();
        let value = tape.value(r.values).data().to_vec();
        if !logits.all_finite() || value.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("policy output".into()));
        }
        Ok(PolicyOutput {
            logits,
            value,
            state: RecurrentState {
                h: tape.value(r.h).clone(),
                c: tape.value(r.c).clone(),
            },
        })
    }

    /// One recurrent step for `N` environments.
    pub fn forward(
        &self,
        obs: &Tensor<T>,
        compass: &Tensor<T>,
        state: &RecurrentState<T>,
        starts: &[bool],
    ) -> Result<PolicyOutput<T>, NnError> {
        self.forward_impl(obs, compass, state, starts, false)
    }

    /// [`Policy::forward`] with every residual branch removed.
    pub fn forward_ablated(
        &self,
        obs: &Tensor<T>,
        compass: &Tensor<T>,
        state: &RecurrentState<T>,
        starts: &[bool],
    ) -> Result<PolicyOutput<T>, NnError> {
        self.forward_impl(obs, compass, state, starts, true)
    }

    /// SE gates `[N, C]` of every block for `obs`, in block order.
    pub fn se_gates(&self, obs: &Tensor<T>) -> Result<Vec<Tensor<T>>, NnError> {
        let mut tape = Tape::new(&self.params);
        let l = &self.layout;
        let x0 = tape.input(obs.clone());
        let mut x = tape.space_to_depth(x0, self.cfg.stem_block)?;
        let w = tape.param(l.stem_w);
        x = tape.conv2d(x, w, l.stem_geom)?;
        let b = tape.param(l.stem_b);
        x = tape.add_scalar(x, b)?;
        x = tape.relu(x);
        let mut gates = Vec::new();
        for blk in &l.blocks {
            let s = tape.param(blk.bias1);
            let mut y = tape.add_scalar(x, s)?;
            y = tape.relu(y);
            let w1 = tape.param(blk.conv1);
            y = tape.conv2d(y, w1, blk.geom1)?;
            let s2 = tape.param(blk.bias2);
            y = tape.add_scalar(y, s2)?;
            y = tape.relu(y);
            let s3 = tape.param(blk.bias3);
            y = tape.add_scalar(y, s3)?;
            let w2 = tape.param(blk.conv2);
            y = tape.conv2d(y, w2, blk.geom2)?;
            let z = tape.spatial_mean(y)?;
            let (w1, b1, w2, b2) = (
                tape.param(blk.se1_w),
                tape.param(blk.se1_b),
                tape.param(blk.se2_w),
                tape.param(blk.se2_b),
            );
            let z = tape.matmul(z, w1, true)?;
            let z = tape.add_row_bias(z, b1)?;
            let z = tape.relu(z);
            let z = tape.matmul(z, w2, true)?;
            let z = tape.add_row_bias(z, b2)?;
            let g = tape.sigmoid(z);
            gates.push(tape.value(g).clone());
            x = self.block(&mut tape, blk, x, false)?;
        }
        Ok(gates)
    }

    /// Names of the layers in the network, in evaluation order. No entry is a
    /// normalization layer.
    pub fn layer_kinds(&self) -> Vec<&'static str> {
        let mut v = vec!["space_to_depth", "conv", "relu"];
        for b in &self.layout.blocks {
            if b.proj.is_some() {
                v.push("conv");
            }
            v.extend([
                "scalar_bias",
                "relu",
                "conv",
                "scalar_bias",
                "relu",
                "scalar_bias",
                "conv",
            ]);
            v.extend(["squeeze_excite", "scalar_multiplier", "scalar_bias", "residual_add"]);
        }
        v.extend(["relu", "linear", "relu", "lstm", "linear", "linear"]);
        v
    }
}

/// Index of the largest logit in each row, lowest index on ties.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let a = logits.shape()[1];
    logits
        .data()
        .chunks(a)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Log-probabilities of each row of `logits`.
pub fn log_softmax_rows<T: Scalar>(logits: &[T], actions: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(actions) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}
