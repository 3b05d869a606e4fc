//! Interaction transformer block: global self-attention, then a mask-routed
//! mixture of experts (background / exclusive / overlap) merged by a
//! region-gated residual update, then a pre-normalised FFN.
//!
//! The overlap expert arbitrates between objects per location. A gating
//! query `q_g = g_Q(z)` aggregates each object code into the background
//! frame (`c̃_p = Attn(q_g, f_K(c_p), f_V(c_p))`), scores it against the
//! query (`s_p = ⟨q_g, c̃_p⟩ / √d`), turns the scores into mixing weights
//! with temperature `τ`, blends the aggregated codes, and injects the blend
//! back with `Attn(f_Q(z), f_K(c), f_V(c))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::mask::{Mask, RoutingMasks};
use crate::tensor::concat;
use crate::tensor::nn::{cross_attention, FeedForward, Init, LayerNorm, Linear, SelfAttention};
use crate::tensor::{Bound, ParamStore, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.5;

/// What the background expert contributes before gating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundMode {
    /// `h_bg = z`, added residually: background features double.
    IdentityResidual,
    /// `h_bg = 0`: background features pass through untouched.
    #[default]
    ZeroResidual,
}

/// Token sequence `[n, d]` encoding one object.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCode(Tensor);

impl ObjectCode {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(shape_err("object code", format!("expected [n, d], got {:?}", tokens.shape())));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Learned weights of one block.
#[derive(Clone, Debug)]
pub struct ItbParams {
    pub dim: usize,
    pub tau: f64,
    pub self_attn: SelfAttention,
    pub f_q: Linear,
    pub f_k: Linear,
    pub f_v: Linear,
    pub g_q: Linear,
    /// Key/value projections of the exclusive experts, shared by all
    /// object slots so the block is equivariant to object order.
    pub ex_k: Linear,
    pub ex_v: Linear,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
}

impl ItbParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, tau: f64, rng: &mut R) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {tau}")));
        }
        let mut proj = |s: &str| Linear::new(store, &format!("{name}.{s}"), dim, dim, true, Init::FanIn, rng);
        let f_q = proj("f_q")?;
        let f_k = proj("f_k")?;
        let f_v = proj("f_v")?;
        let g_q = proj("g_q")?;
        let ex_k = proj("ex_k")?;
        let ex_v = proj("ex_v")?;
        Ok(Self {
            dim,
            tau,
            self_attn: SelfAttention::new(store, &format!("{name}.attn"), dim, rng)?,
            f_q,
            f_k,
            f_v,
            g_q,
            ex_k,
            ex_v,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, rng)?,
        })
    }
}

/// Graph-side gate quantities of one overlap expert evaluation.
#[derive(Clone, Debug)]
pub struct GateVars<'g> {
    /// Per-object scores, each `[hw, 1]`.
    pub scores: Vec<Var<'g>>,
    /// Per-object mixing weights, each `[hw, 1]`.
    pub alpha: Vec<Var<'g>>,
    /// Aggregated codes `c̃_p`, each `[hw, d]`.
    pub aggregated: Vec<Var<'g>>,
    /// Blended context.
    pub context: Var<'g>,
}

/// Plain-value snapshot of a gate: `[hw, M]` scores and weights, and for
/// two objects the score difference `s_a − s_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapGateReport {
    pub scores: Tensor,
    pub alpha: Tensor,
    pub delta_s: Option<Vec<f64>>,
}

impl OverlapGateReport {
    pub fn from_vars(gate: &GateVars<'_>) -> OverlapGateReport {
        let m = gate.scores.len();
        let hw = gate.scores[0].value().len();
        let gather = |vs: &[Var<'_>]| {
            let cols: Vec<_> = vs.iter().map(|v| v.value()).collect();
            let mut data = Vec::with_capacity(hw * m);
            for i in 0..hw {
                for c in &cols {
                    data.push(c.data()[i]);
                }
            }
            Tensor::new([hw, m], data).expect("gate values are finite")
        };
        let scores = gather(&gate.scores);
        let delta_s = (m == 2).then(|| (0..hw).map(|i| scores.at2(i, 0) - scores.at2(i, 1)).collect());
        OverlapGateReport {
            alpha: gather(&gate.alpha),
            scores,
            delta_s,
        }
    }

    pub fn locations(&self) -> usize {
        self.scores.shape()[0]
    }
}

/// How two-object gates are normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateForm {
    /// `α_a = σ(Δs/τ)`, `α_b = σ(−Δs/τ)` for `M = 2`, softmax otherwise.
    #[default]
    Auto,
    /// Softmax over objects for every `M`.
    Softmax,
}

pub fn background_expert<'g>(z: Var<'g>, mode: BackgroundMode) -> Result<Var<'g>> {
    match mode {
        BackgroundMode::IdentityResidual => Ok(z),
        BackgroundMode::ZeroResidual => Ok(z.graph().constant(Tensor::zeros(z.shape()))),
    }
}

fn check_code(code: Var<'_>, dim: usize) -> Result<()> {
    let s = code.shape();
    if s.len() != 2 || s[1] != dim {
        return Err(shape_err("object code", format!("expected [n, {dim}], got {s:?}")));
    }
    Ok(())
}

/// `Attn(f_Q(z), K_ex(c_p), V_ex(c_p))`; the caller applies the region gate.
pub fn exclusive_expert<'g>(p: &Bound<'g>, params: &ItbParams, z: Var<'g>, code: Var<'g>) -> Result<Var<'g>> {
    check_code(code, params.dim)?;
    let q = params.f_q.forward(p, z)?;
    cross_attention(q, params.ex_k.forward(p, code)?, params.ex_v.forward(p, code)?)
}

struct Aggregated<'g> {
    query: Var<'g>,
    codes: Vec<Var<'g>>,
    scores: Vec<Var<'g>>,
}

fn aggregate<'g>(p: &Bound<'g>, params: &ItbParams, z: Var<'g>, codes: &[Var<'g>]) -> Result<Aggregated<'g>> {
    let q_g = params.g_q.forward(p, z)?;
    let inv_sqrt_d = 1.0 / (params.dim as f64).sqrt();
    let mut agg = Vec::with_capacity(codes.len());
    let mut scores = Vec::with_capacity(codes.len());
    for &c in codes {
        check_code(c, params.dim)?;
        let c_tilde = cross_attention(q_g, params.f_k.forward(p, c)?, params.f_v.forward(p, c)?)?;
        scores.push(q_g.mul(&c_tilde)?.sum_last()?.scale(inv_sqrt_d)?);
        agg.push(c_tilde);
    }
    Ok(Aggregated {
        query: z,
        codes: agg,
        scores,
    })
}

fn inject<'g>(p: &Bound<'g>, params: &ItbParams, z: Var<'g>, context: Var<'g>) -> Result<Var<'g>> {
    let q = params.f_q.forward(p, z)?;
    cross_attention(q, params.f_k.forward(p, context)?, params.f_v.forward(p, context)?)
}

/// Two-object overlap expert with the logistic gate
/// `α_a = σ((s_a − s_b)/τ)`, `α_b = σ((s_b − s_a)/τ)`.
pub fn overlap_expert_pair<'g>(
    p: &Bound<'g>,
    params: &ItbParams,
    z: Var<'g>,
    c_a: Var<'g>,
    c_b: Var<'g>,
) -> Result<(Var<'g>, GateVars<'g>)> {
    let agg = aggregate(p, params, z, &[c_a, c_b])?;
    let (s_a, s_b) = (agg.scores[0], agg.scores[1]);
    let inv_tau = 1.0 / params.tau;
    let alpha_a = s_a.sub(&s_b)?.scale(inv_tau)?.sigmoid()?;
    let alpha_b = s_b.sub(&s_a)?.scale(inv_tau)?.sigmoid()?;
    let context = alpha_a
        .mul(&agg.codes[0])?
        .add(&alpha_b.mul(&agg.codes[1])?)?;
    let h = inject(p, params, agg.query, context)?;
    Ok((
        h,
        GateVars {
            scores: agg.scores,
            alpha: vec![alpha_a, alpha_b],
            aggregated: agg.codes,
            context,
        },
    ))
}

/// `M`-object overlap expert with a temperature softmax over objects.
pub fn overlap_expert_multi<'g>(
    p: &Bound<'g>,
    params: &ItbParams,
    z: Var<'g>,
    codes: &[Var<'g>],
) -> Result<(Var<'g>, GateVars<'g>)> {
    if codes.len() < 2 {
        return Err(invalid(format!("overlap expert needs at least two objects, got {}", codes.len())));
    }
    let agg = aggregate(p, params, z, codes)?;
    let logits = concat(&agg.scores, 1)?.scale(1.0 / params.tau)?;
    let weights = logits.softmax()?;
    let alpha = (0..codes.len())
        .map(|i| weights.slice(1, i, 1))
        .collect::<Result<Vec<_>>>()?;
    let mut context = alpha[0].mul(&agg.codes[0])?;
    for (a, c) in alpha.iter().zip(&agg.codes).skip(1) {
        context = context.add(&a.mul(c)?)?;
    }
    let h = inject(p, params, agg.query, context)?;
    Ok((
        h,
        GateVars {
            scores: agg.scores,
            alpha,
            aggregated: agg.codes,
            context,
        },
    ))
}

fn gate_column<'g>(z: Var<'g>, m: &Mask) -> Var<'g> {
    let t = Tensor::new([m.values().len(), 1], m.values().to_vec()).expect("mask values are finite");
    z.graph().constant(t)
}

fn any_positive(m: &Mask) -> bool {
    m.values().iter().any(|&v| v > 0.0)
}

/// One block. `z` is `[h·w, d]` with `h × w` matching the routing masks;
/// `codes[p]` goes with `routing.exclusive[p]`.
pub fn itb_forward<'g>(
    p: &Bound<'g>,
    params: &ItbParams,
    z: Var<'g>,
    codes: &[Var<'g>],
    routing: &RoutingMasks,
    mode: BackgroundMode,
) -> Result<(Var<'g>, Option<GateVars<'g>>)> {
    itb_forward_with(p, params, z, codes, routing, mode, GateForm::Auto)
}

pub fn itb_forward_with<'g>(
    p: &Bound<'g>,
    params: &ItbParams,
    z: Var<'g>,
    codes: &[Var<'g>],
    routing: &RoutingMasks,
    mode: BackgroundMode,
    form: GateForm,
) -> Result<(Var<'g>, Option<GateVars<'g>>)> {
    routing.validate()?;
    let hw = routing.width() * routing.height();
    let zs = z.shape();
    if zs != [hw, params.dim] {
        return Err(shape_err(
            "itb_forward",
            format!("features {zs:?} vs {}x{} routing at width {}", routing.width(), routing.height(), params.dim),
        ));
    }
    if codes.len() != routing.object_count() {
        return Err(Error::Partition(format!(
            "{} object codes for {} exclusive regions",
            codes.len(),
            routing.object_count()
        )));
    }

    let z1 = z.add(&params.self_attn.forward(p, z)?)?;

    // Exclusive terms are summed first so that, for two objects, swapping
    // them only commutes an addition.
    let mut delta: Option<Var<'g>> = None;
    for (code, m) in codes.iter().zip(&routing.exclusive) {
        let term = gate_column(z1, m).mul(&exclusive_expert(p, params, z1, *code)?)?;
        delta = Some(match delta {
            Some(d) => d.add(&term)?,
            None => term,
        });
    }
    let mut delta = delta.ok_or_else(|| invalid("at least one object is required"))?;

    if mode == BackgroundMode::IdentityResidual {
        let h_bg = background_expert(z1, mode)?;
        delta = gate_column(z1, &routing.background).mul(&h_bg)?.add(&delta)?;
    }

    let mut gate = None;
    if codes.len() >= 2 {
        let (h_ov, g) = match (codes.len(), form) {
            (2, GateForm::Auto) => overlap_expert_pair(p, params, z1, codes[0], codes[1])?,
            _ => overlap_expert_multi(p, params, z1, codes)?,
        };
        delta = delta.add(&gate_column(z1, &routing.overlap).mul(&h_ov)?)?;
        gate = Some(g);
    } else if any_positive(&routing.overlap) {
        return Err(Error::Partition("single object with a non-empty overlap region".into()));
    }

    let z2 = z1.add(&delta)?;
    let out = z2.add(&params.ffn.forward(p, params.norm.forward(p, z2)?)?)?;
    Ok((out, gate))
}

/// U-shaped stack: `levels` stride-2 average-pool stages down, one middle
/// block, and mirrored nearest-neighbour upsampling with skip additions.
/// `levels = 0` is a single block.
#[derive(Clone, Debug)]
pub struct ItbStack {
    pub blocks: Vec<ItbParams>,
    pub levels: usize,
}

/// Output of a stack pass: features plus one optional gate per block.
pub struct StackOutput<'g> {
    pub features: Var<'g>,
    pub gates: Vec<Option<GateVars<'g>>>,
}

impl ItbStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        levels: usize,
        tau: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..2 * levels + 1)
            .map(|i| ItbParams::new(store, &format!("{name}.{i}"), dim, tau, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, levels })
    }

    /// Resolution level (0 = finest) at which block `i` runs.
    pub fn block_level(&self, i: usize) -> usize {
        if i <= self.levels {
            i
        } else {
            2 * self.levels - i
        }
    }

    /// `routings[l]` must be at `height / 2^l × width / 2^l`.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        z: Var<'g>,
        height: usize,
        width: usize,
        codes: &[Var<'g>],
        routings: &[RoutingMasks],
        mode: BackgroundMode,
    ) -> Result<StackOutput<'g>> {
        if routings.len() != self.levels + 1 {
            return Err(invalid(format!(
                "{} routing resolutions for a stack with {} levels",
                routings.len(),
                self.levels + 1
            )));
        }
        for (l, r) in routings.iter().enumerate() {
            let (h, w) = (height >> l, width >> l);
            if (r.height(), r.width()) != (h, w) || (h << l) != height || (w << l) != width {
                return Err(invalid(format!(
                    "level {l} routing is {}x{}, expected {w}x{h}",
                    r.width(),
                    r.height()
                )));
            }
        }
        let mut gates = Vec::with_capacity(self.blocks.len());
        let mut skips = Vec::with_capacity(self.levels);
        let mut x = z;
        for (i, block) in self.blocks.iter().enumerate() {
            let level = self.block_level(i);
            if i > self.levels {
                let (h, w) = (height >> (level + 1), width >> (level + 1));
                let skip: Var<'g> = skips.pop().expect("one skip per level");
                x = x.upsample2(h, w)?.add(&skip)?;
            }
            let (out, gate) = itb_forward(p, block, x, codes, &routings[level], mode)?;
            gates.push(gate);
            x = out;
            if i < self.levels {
                skips.push(x);
                x = x.avg_pool2(height >> level, width >> level)?;
            }
        }
        Ok(StackOutput { features: x, gates })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::build_routing_masks;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore,
        block: ItbParams,
        z: Tensor,
        c_a: Tensor,
        c_b: Tensor,
    }

    fn fixture(seed: u64, hw: usize, d: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = ItbParams::new(&mut store, "b", d, DEFAULT_TAU, &mut rng).unwrap();
        Fixture {
            store,
            block,
            z: Tensor::randn([hw, d], 1.0, &mut rng),
            c_a: Tensor::randn([3, d], 1.0, &mut rng),
            c_b: Tensor::randn([5, d], 1.0, &mut rng),
        }
    }

    fn masks_4x4() -> (Mask, Mask) {
        (
            Mask::from_fn(4, 4, |x, y| x < 3 && y < 3),
            Mask::from_fn(4, 4, |x, y| x >= 1 && y >= 1),
        )
    }

    #[test]
    fn background_modes_on_pure_background() {
        let f = fixture(1, 16, 4);
        let mut store = f.store.clone();
        for lin in [&f.block.self_attn.out, &f.block.ffn.down] {
            store.set(lin.weight, Tensor::zeros([lin.d_in, lin.d_out])).unwrap();
        }
        // Routing with every location in the background.
        let empty = Mask::zeros(4, 4);
        let routing = build_routing_masks(&[empty.clone(), empty], 4, 4).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let z = g.constant(f.z.clone());
        let (ca, cb) = (g.constant(f.c_a.clone()), g.constant(f.c_b.clone()));
        let (zero, _) = itb_forward(&p, &f.block, z, &[ca, cb], &routing, BackgroundMode::ZeroResidual).unwrap();
        assert_eq!(*zero.value(), f.z);
        let (ident, _) =
            itb_forward(&p, &f.block, z, &[ca, cb], &routing, BackgroundMode::IdentityResidual).unwrap();
        assert!(ident.value().max_abs_diff(&f.z.map(|v| 2.0 * v)) < 1e-15);
    }

    #[test]
    fn background_modes_agree_without_background() {
        let f = fixture(2, 16, 4);
        let full = Mask::ones(4, 4);
        let routing = build_routing_masks(&[full.clone(), Mask::from_fn(4, 4, |x, _| x < 2)], 4, 4).unwrap();
        assert!(routing.background.values().iter().all(|&v| v == 0.0));
        let g = Graph::new();
        let p = f.store.bind(&g);
        let z = g.constant(f.z.clone());
        let (ca, cb) = (g.constant(f.c_a.clone()), g.constant(f.c_b.clone()));
        let (a, _) = itb_forward(&p, &f.block, z, &[ca, cb], &routing, BackgroundMode::ZeroResidual).unwrap();
        let (b, _) = itb_forward(&p, &f.block, z, &[ca, cb], &routing, BackgroundMode::IdentityResidual).unwrap();
        assert_eq!(*a.value(), *b.value());
    }

    #[test]
    fn exclusive_expert_singleton_code() {
        let f = fixture(3, 6, 4);
        let g = Graph::new();
        let p = f.store.bind(&g);
        let z = g.constant(f.z.clone());
        let token = Tensor::new([1, 4], f.c_a.row(0).to_vec()).unwrap();
        let code = g.constant(token);
        let out = exclusive_expert(&p, &f.block, z, code).unwrap().value();
        assert_eq!(out.shape(), &[6, 4]);
        let v = f.block.ex_v.forward(&p, code).unwrap().value();
        for r in 0..6 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn exclusive_expert_rejects_wrong_width() {
        let f = fixture(4, 6, 4);
        let g = Graph::new();
        let p = f.store.bind(&g);
        let z = g.constant(f.z.clone());
        let code = g.constant(Tensor::zeros([2, 3]));
        assert!(exclusive_expert(&p, &f.block, z, code).is_err());
    }

    #[test]
    fn identical_codes_give_even_split() {
        let f = fixture(5, 8, 4);
        let g = Graph::new();
        let p = f.store.bind(&g);
        let z = g.constant(f.z.clone());
        let c = g.constant(f.c_a.clone());
        let (_, gate) = overlap_expert_pair(&p, &f.block, z, c, c).unwrap();
        let r = OverlapGateReport::from_vars(&gate);
        assert!(r.alpha.data().iter().all(|&a| a == 0.5));
        assert!(r.delta_s.unwrap().iter().all(|&d| d == 0.0));
        assert!(gate.context.value().max_abs_diff(&gate.aggregated[0].value()) < 1e-15);
    }

    #[test]
    fn unit_score_gap_gives_logistic_of_one() {
        // With g_Q = I (no bias), f_K = 0 and f_V = I, each aggregated code
        // is the mean of the object's tokens, so s_p = ⟨z, mean(c_p)⟩/√d.
        let d = 4;
        let mut f = fixture(6, 1, d);
        for lin in [&f.block.g_q, &f.block.f_v] {
            f.store.set(lin.weight, Tensor::eye(d)).unwrap();
        }
        f.store.set(f.block.f_k.weight, Tensor::zeros([d, d])).unwrap();
        let tau = f.block.tau;
        let z = Tensor::new([1, d], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        // Δs = (x_a − x_b)/√d = τ  ⇒  x_a − x_b = τ·√d.
        let gap = tau * (d as f64).sqrt();
        let c_a = Tensor::new([1, d], vec![gap, 0.3, -0.2, 0.1]).unwrap();
        let c_b = Tensor::new([1, d], vec![0.0, 0.3, -0.2, 0.1]).unwrap();
        let g = Graph::new();
        let p = f.store.bind(&g);
        let (_, gate) =
            overlap_expert_pair(&p, &f.block, g.constant(z), g.constant(c_a), g.constant(c_b)).unwrap();
        let r = OverlapGateReport::from_vars(&gate);
        assert!((r.delta_s.unwrap()[0] - tau).abs() < 1e-12);
        assert!((r.alpha.at2(0, 0) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn swapping_codes_mirrors_alpha_and_keeps_output() {
        let f = fixture(7, 10, 4);
        let g = Graph::new();
        let p = f.store.bind(&g);
        let z = g.constant(f.z.clone());
        let (ca, cb) = (g.constant(f.c_a.clone()), g.constant(f.c_b.clone()));
        let (h1, g1) = overlap_expert_pair(&p, &f.block, z, ca, cb).unwrap();
        let (h2, g2) = overlap_expert_pair(&p, &f.block, z, cb, ca).unwrap();
        let (r1, r2) = (OverlapGateReport::from_vars(&g1), OverlapGateReport::from_vars(&g2));
        for i in 0..10 {
            assert_eq!(r1.alpha.at2(i, 0), r2.alpha.at2(i, 1));
            assert!((r1.alpha.at2(i, 0) - (1.0 - r2.alpha.at2(i, 0))).abs() < 1e-12);
            assert_eq!(r1.delta_s.as_ref().unwrap()[i], -r2.delta_s.as_ref().unwrap()[i]);
        }
        assert!(h1.value().max_abs_diff(&h2.value()) < 1e-12);
    }

    #[test]
    fn multi_with_two_objects_matches_pair() {
        let f = fixture(8, 10, 4);
        let g = Graph::new();
        let p = f.store.bind(&g);
        let z = g.constant(f.z.clone());
        let (ca, cb) = (g.constant(f.c_a.clone()), g.constant(f.c_b.clone()));
        let (h1, g1) = overlap_expert_pair(&p, &f.block, z, ca, cb).unwrap();
        let (h2, g2) = overlap_expert_multi(&p, &f.block, z, &[ca, cb]).unwrap();
        let (r1, r2) = (OverlapGateReport::from_vars(&g1), OverlapGateReport::from_vars(&g2));
        assert!(r1.alpha.max_abs_diff(&r2.alpha) < 1e-12);
        assert!(h1.value().max_abs_diff(&h2.value()) < 1e-12);
        assert!(overlap_expert_multi(&p, &f.block, z, &[ca]).is_err());
    }

    #[test]
    fn multi_identical_codes_uniform_weights() {
        let f = fixture(9, 6, 4);
        let g = Graph::new();
        let p = f.store.bind(&g);
        let z = g.constant(f.z.clone());
        let c = g.constant(f.c_b.clone());
        let (_, gate) = overlap_expert_multi(&p, &f.block, z, &[c, c, c]).unwrap();
        let r = OverlapGateReport::from_vars(&gate);
        assert!(r.alpha.data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
        assert!(r.delta_s.is_none());
        assert!(gate.context.value().max_abs_diff(&gate.aggregated[0].value()) < 1e-14);
    }

    #[test]
    fn temperature_sharpens_the_gate() {
        let mut prev = 0.0;
        for tau in [2.0, 1.0, 0.5, 0.25] {
            let mut f = fixture(10, 4, 4);
            f.block.tau = tau;
            let g = Graph::new();
            let p = f.store.bind(&g);
            let z = g.constant(f.z.clone());
            let (ca, cb) = (g.constant(f.c_a.clone()), g.constant(f.c_b.clone()));
            let (_, gate) = overlap_expert_pair(&p, &f.block, z, ca, cb).unwrap();
            let r = OverlapGateReport::from_vars(&gate);
            let dev = (r.alpha.at2(0, 0) - 0.5).abs();
            assert!(dev > prev, "tau {tau}: {dev} <= {prev}");
            prev = dev;
        }
    }

    #[test]
    fn disjoint_objects_ignore_overlap_expert() {
        let f = fixture(11, 16, 4);
        let a = Mask::from_fn(4, 4, |x, _| x < 2);
        let b = Mask::from_fn(4, 4, |x, _| x >= 3);
        let routing = build_routing_masks(&[a, b], 4, 4).unwrap();
        let run = |store: &ParamStore| {
            let g = Graph::new();
            let p = store.bind(&g);
            let z = g.constant(f.z.clone());
            let (ca, cb) = (g.constant(f.c_a.clone()), g.constant(f.c_b.clone()));
            let (out, _) = itb_forward(&p, &f.block, z, &[ca, cb], &routing, BackgroundMode::ZeroResidual).unwrap();
            (*out.value()).clone()
        };
        let before = run(&f.store);
        let mut perturbed = f.store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for lin in [&f.block.g_q, &f.block.f_k, &f.block.f_v] {
            perturbed.set(lin.weight, Tensor::randn([4, 4], 1.0, &mut rng)).unwrap();
        }
        assert_eq!(before, run(&perturbed));
    }

    #[test]
    fn code_perturbation_stays_in_its_regions() {
        let f = fixture(12, 16, 4);
        let (a, b) = masks_4x4();
        let routing = build_routing_masks(&[a, b], 4, 4).unwrap();
        let run = |c_a: &Tensor| {
            let g = Graph::new();
            let p = f.store.bind(&g);
            let z = g.constant(f.z.clone());
            let (ca, cb) = (g.constant(c_a.clone()), g.constant(f.c_b.clone()));
            let (out, _) = itb_forward(&p, &f.block, z, &[ca, cb], &routing, BackgroundMode::ZeroResidual).unwrap();
            (*out.value()).clone()
        };
        let base = run(&f.c_a);
        let moved = run(&f.c_a.map(|v| v + 0.7));
        for i in 0..16 {
            let touched = routing.exclusive[0].values()[i] + routing.overlap.values()[i] > 0.0;
            let changed = base.row(i) != moved.row(i);
            if !touched {
                assert!(!changed, "location {i} changed outside the object's regions");
            }
        }
        assert!(base != moved);
    }

    #[test]
    fn rejects_bad_routing_and_code_count() {
        let f = fixture(13, 16, 4);
        let (a, b) = masks_4x4();
        let mut routing = build_routing_masks(&[a, b], 4, 4).unwrap();
        let g = Graph::new();
        let p = f.store.bind(&g);
        let z = g.constant(f.z.clone());
        let ca = g.constant(f.c_a.clone());
        assert!(itb_forward(&p, &f.block, z, &[ca], &routing, BackgroundMode::ZeroResidual).is_err());
        routing.overlap.set(0, 0, 1.0);
        routing.background.set(0, 0, 1.0);
        assert!(matches!(
            itb_forward(&p, &f.block, z, &[ca, ca], &routing, BackgroundMode::ZeroResidual),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn stack_depth_one_is_a_single_block() {
        let f = fixture(14, 16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let stack = ItbStack::new(&mut store, "s", 4, 0, DEFAULT_TAU, &mut rng).unwrap();
        let (a, b) = masks_4x4();
        let routing = build_routing_masks(&[a, b], 4, 4).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let z = g.constant(f.z.clone());
        let (ca, cb) = (g.constant(f.c_a.clone()), g.constant(f.c_b.clone()));
        let out = stack
            .forward(&p, z, 4, 4, &[ca, cb], std::slice::from_ref(&routing), BackgroundMode::ZeroResidual)
            .unwrap();
        let (single, _) = itb_forward(&p, &stack.blocks[0], z, &[ca, cb], &routing, BackgroundMode::ZeroResidual).unwrap();
        assert_eq!(*out.features.value(), *single.value());
    }

    #[test]
    fn stack_preserves_shape_and_checks_resolutions() {
        let f = fixture(15, 16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        let stack = ItbStack::new(&mut store, "s", 4, 2, DEFAULT_TAU, &mut rng).unwrap();
        assert_eq!(stack.blocks.len(), 5);
        let (a, b) = masks_4x4();
        let routings: Vec<_> = [4, 2, 1]
            .iter()
            .map(|&r| build_routing_masks(&[a.clone(), b.clone()], r, r).unwrap())
            .collect();
        let g = Graph::new();
        let p = store.bind(&g);
        let z = g.constant(f.z.clone());
        let (ca, cb) = (g.constant(f.c_a.clone()), g.constant(f.c_b.clone()));
        let out = stack.forward(&p, z, 4, 4, &[ca, cb], &routings, BackgroundMode::ZeroResidual).unwrap();
        assert_eq!(out.features.shape(), vec![16, 4]);
        assert_eq!(out.gates.len(), 5);
        assert!(stack
            .forward(&p, z, 4, 4, &[ca, cb], &routings[..2], BackgroundMode::ZeroResidual)
            .is_err());
    }
}
