//! Sequence policy: convolutional/LSTM observation feature extractor, an
//! encoder over the agent axis with a per-agent value head, and a masked
//! autoregressive action decoder. The tape forward here is used for
//! training; `infer` holds the cached-decoding inference path.

pub mod infer;

use crate::autodiff::{lstm_step, LstmVars, Tape, Var};
use crate::env::N_ACTIONS;
use crate::obs::N_CHANNELS;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Token index used for the first decode step, before any action exists.
pub const START_TOKEN: usize = N_ACTIONS;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// FOV size; must be odd and >= 5 so two pooling stages survive.
    pub fov: usize,
    /// Embedding width.
    pub d: usize,
    pub n_heads: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    /// Channel widths of the two convolution blocks.
    pub c1: usize,
    pub c2: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { fov: 11, d: 64, n_heads: 4, n_enc: 2, n_dec: 2, c1: 8, c2: 16 }
    }
}

impl PolicyConfig {
    /// Spatial side length after the two pooling stages.
    pub fn pooled(&self) -> usize {
        self.fov / 4
    }

    /// Flattened width of the convolution stack output.
    pub fn conv_out(&self) -> usize {
        self.c2 * self.pooled() * self.pooled()
    }

    pub fn validate(&self) {
        assert!(self.fov >= 5 && self.fov % 2 == 1, "fov must be odd and >= 5");
        assert_eq!(self.d % self.n_heads, 0, "embedding width must divide into heads");
    }
}

/// Named parameter arrays in a stable insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.values.push(values);
    }

    pub fn get(&self, name: &str) -> (&[usize], &[f64]) {
        let i = self.index[name];
        (&self.shapes[i], &self.values[i])
    }

    pub fn idx(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn save(&self, stem: &std::path::Path) -> std::io::Result<()> {
        let arrays: Vec<(String, Vec<usize>, &[f64])> = self
            .names
            .iter()
            .zip(self.shapes.iter().zip(&self.values))
            .map(|(n, (s, v))| (n.clone(), s.clone(), v.as_slice()))
            .collect();
        crate::autodiff::save_checkpoint(stem, &arrays)
    }

    pub fn load(stem: &std::path::Path) -> std::io::Result<Self> {
        let mut store = ParamStore::default();
        for (name, shape, values) in crate::autodiff::load_checkpoint(stem)? {
            store.add(&name, shape, values);
        }
        Ok(store)
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let s = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

/// Small positive bias so relu units start slightly active instead of
/// exactly on the kink, where they would never receive gradient.
const BIAS_INIT: f64 = 0.01;

fn add_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out_d: usize, in_d: usize) {
    store.add(&format!("{name}.w"), vec![out_d, in_d], uniform_init(rng, out_d * in_d, in_d));
    store.add(&format!("{name}.b"), vec![out_d], vec![BIAS_INIT; out_d]);
}

fn add_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.add(&format!("{name}.g"), vec![d], vec![1.0; d]);
    store.add(&format!("{name}.b"), vec![d], vec![0.0; d]);
}

fn add_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) {
    for part in ["wq", "wk", "wv", "wo"] {
        store.add(&format!("{name}.{part}"), vec![d, d], uniform_init(rng, d * d, d));
    }
    for part in ["bq", "bk", "bv", "bo"] {
        store.add(&format!("{name}.{part}"), vec![d], vec![0.0; d]);
    }
}

fn add_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, o: usize, c: usize) {
    store.add(&format!("{name}.w"), vec![o, c, 3, 3], uniform_init(rng, o * c * 9, c * 9));
    store.add(&format!("{name}.b"), vec![o], vec![BIAS_INIT; o]);
}

/// Build a freshly initialized parameter set.
pub fn init_params(cfg: &PolicyConfig, seed: u64) -> ParamStore {
    cfg.validate();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    let d = cfg.d;

    // extractor: two VGG blocks (3 conv + pool each), one extra conv,
    // two fully connected layers, one LSTM cell
    add_conv(&mut store, &mut rng, "ext.vgg1.conv0", cfg.c1, N_CHANNELS);
    add_conv(&mut store, &mut rng, "ext.vgg1.conv1", cfg.c1, cfg.c1);
    add_conv(&mut store, &mut rng, "ext.vgg1.conv2", cfg.c1, cfg.c1);
    add_conv(&mut store, &mut rng, "ext.vgg2.conv0", cfg.c2, cfg.c1);
    add_conv(&mut store, &mut rng, "ext.vgg2.conv1", cfg.c2, cfg.c2);
    add_conv(&mut store, &mut rng, "ext.vgg2.conv2", cfg.c2, cfg.c2);
    add_conv(&mut store, &mut rng, "ext.conv3", cfg.c2, cfg.c2);
    let d0 = cfg.conv_out();
    add_linear(&mut store, &mut rng, "ext.fc0", d, d0);
    add_linear(&mut store, &mut rng, "ext.fc1", d, d);
    add_linear(&mut store, &mut rng, "ext.proj", d, d0);
    store.add("ext.lstm.wx", vec![4 * d, d], uniform_init(&mut rng, 4 * d * d, d));
    store.add("ext.lstm.wh", vec![4 * d, d], uniform_init(&mut rng, 4 * d * d, d));
    store.add("ext.lstm.b", vec![4 * d], vec![BIAS_INIT; 4 * d]);

    for l in 0..cfg.n_enc {
        add_layer_norm(&mut store, &format!("enc{l}.ln1"), d);
        add_attention(&mut store, &mut rng, &format!("enc{l}.attn"), d);
        add_layer_norm(&mut store, &format!("enc{l}.ln2"), d);
        add_linear(&mut store, &mut rng, &format!("enc{l}.mlp.l0"), 2 * d, d);
        add_linear(&mut store, &mut rng, &format!("enc{l}.mlp.l1"), d, 2 * d);
    }
    add_layer_norm(&mut store, "enc.lnf", d);
    add_linear(&mut store, &mut rng, "val.l0", d, d);
    add_linear(&mut store, &mut rng, "val.l1", 1, d);

    store.add(
        "dec.embed",
        vec![N_ACTIONS + 1, d],
        uniform_init(&mut rng, (N_ACTIONS + 1) * d, d),
    );
    for l in 0..cfg.n_dec {
        add_layer_norm(&mut store, &format!("dec{l}.ln1"), d);
        add_attention(&mut store, &mut rng, &format!("dec{l}.self"), d);
        add_layer_norm(&mut store, &format!("dec{l}.ln2"), d);
        add_attention(&mut store, &mut rng, &format!("dec{l}.cross"), d);
        add_layer_norm(&mut store, &format!("dec{l}.ln3"), d);
        add_linear(&mut store, &mut rng, &format!("dec{l}.mlp.l0"), 2 * d, d);
        add_linear(&mut store, &mut rng, &format!("dec{l}.mlp.l1"), d, 2 * d);
    }
    add_layer_norm(&mut store, "dec.lnf", d);
    add_linear(&mut store, &mut rng, "head.l0", d, d);
    add_linear(&mut store, &mut rng, "head.l1", N_ACTIONS, d);

    store
}

/// Parameter handles on a tape, keyed by name.
pub struct PolicyVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl PolicyVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Insert every parameter as a tape input, preserving store order so that
/// gradients map back positionally.
pub fn insert_params(tape: &mut Tape, store: &ParamStore) -> PolicyVars {
    let mut vars = Vec::with_capacity(store.len());
    let mut index = HashMap::new();
    for i in 0..store.len() {
        let v = tape.input(&store.shapes[i], store.values[i].clone());
        index.insert(store.names[i].clone(), i);
        vars.push(v);
    }
    PolicyVars { vars, index }
}

fn linear(tape: &mut Tape, vars: &PolicyVars, name: &str, x: Var) -> Var {
    let w = vars.get(&format!("{name}.w"));
    let b = vars.get(&format!("{name}.b"));
    if tape.shape(x).len() == 1 {
        let y = tape.matvec(w, x);
        tape.add(y, b)
    } else {
        let y = tape.matmul_nt(x, w);
        tape.add_bias(y, b)
    }
}

fn layer_norm(tape: &mut Tape, vars: &PolicyVars, name: &str, x: Var) -> Var {
    let g = vars.get(&format!("{name}.g"));
    let b = vars.get(&format!("{name}.b"));
    tape.layer_norm(x, g, b)
}

fn conv_relu(tape: &mut Tape, vars: &PolicyVars, name: &str, x: Var) -> Var {
    let w = vars.get(&format!("{name}.w"));
    let b = vars.get(&format!("{name}.b"));
    let y = tape.conv2d(x, w, b);
    tape.relu(y)
}

/// Observation feature extractor: conv stack -> x0, FC stack -> x1, sum
/// projected to a common width, then one LSTM step. Returns (z, h', c').
pub fn extract_features(
    tape: &mut Tape,
    vars: &PolicyVars,
    cfg: &PolicyConfig,
    obs: &[f64],
    h: Var,
    c: Var,
) -> (Var, Var, Var) {
    let m = cfg.fov;
    assert_eq!(obs.len(), N_CHANNELS * m * m, "observation size mismatch");
    let x = tape.input(&[N_CHANNELS, m, m], obs.to_vec());
    let x = conv_relu(tape, vars, "ext.vgg1.conv0", x);
    let x = conv_relu(tape, vars, "ext.vgg1.conv1", x);
    let x = conv_relu(tape, vars, "ext.vgg1.conv2", x);
    let x = tape.maxpool2d(x);
    let x = conv_relu(tape, vars, "ext.vgg2.conv0", x);
    let x = conv_relu(tape, vars, "ext.vgg2.conv1", x);
    let x = conv_relu(tape, vars, "ext.vgg2.conv2", x);
    let x = tape.maxpool2d(x);
    let x = conv_relu(tape, vars, "ext.conv3", x);
    let x0 = tape.reshape(x, &[cfg.conv_out()]);

    let x1 = linear(tape, vars, "ext.fc0", x0);
    let x1 = tape.relu(x1);
    let x1 = linear(tape, vars, "ext.fc1", x1);
    let x1 = tape.relu(x1);

    let x0p = linear(tape, vars, "ext.proj", x0);
    let u = tape.add(x0p, x1);

    let lstm = LstmVars {
        wx: vars.get("ext.lstm.wx"),
        wh: vars.get("ext.lstm.wh"),
        b: vars.get("ext.lstm.b"),
    };
    let (h_new, c_new) = lstm_step(tape, u, h, c, &lstm);
    (h_new, h_new, c_new)
}

/// Multi-head attention; `mask` (if any) is added to the pre-softmax scores.
fn attention(
    tape: &mut Tape,
    vars: &PolicyVars,
    cfg: &PolicyConfig,
    name: &str,
    queries: Var,
    keys_values: Var,
    mask: Option<&[f64]>,
) -> Var {
    let d = cfg.d;
    let dh = d / cfg.n_heads;
    let nq = tape.shape(queries)[0];
    let nk = tape.shape(keys_values)[0];
    let q = tape.matmul_nt(queries, vars.get(&format!("{name}.wq")));
    let q = tape.add_bias(q, vars.get(&format!("{name}.bq")));
    let k = tape.matmul_nt(keys_values, vars.get(&format!("{name}.wk")));
    let k = tape.add_bias(k, vars.get(&format!("{name}.bk")));
    let v = tape.matmul_nt(keys_values, vars.get(&format!("{name}.wv")));
    let v = tape.add_bias(v, vars.get(&format!("{name}.bv")));
    let mask_var = mask.map(|m| {
        assert_eq!(m.len(), nq * nk);
        tape.input(&[nq, nk], m.to_vec())
    });
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hh in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, hh * dh, (hh + 1) * dh);
        let kh = tape.slice_cols(k, hh * dh, (hh + 1) * dh);
        let vh = tape.slice_cols(v, hh * dh, (hh + 1) * dh);
        let scores = tape.matmul_nt(qh, kh);
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(mv) = mask_var {
            scores = tape.add(scores, mv);
        }
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&heads);
    let out = tape.matmul_nt(cat, vars.get(&format!("{name}.wo")));
    tape.add_bias(out, vars.get(&format!("{name}.bo")))
}

fn mlp_block(tape: &mut Tape, vars: &PolicyVars, name: &str, x: Var) -> Var {
    let y = linear(tape, vars, &format!("{name}.l0"), x);
    let y = tape.relu(y);
    linear(tape, vars, &format!("{name}.l1"), y)
}

/// Pre-norm residual block: x + Attn(LN(x)) then x + MLP(LN(x)).
fn encoder_block(tape: &mut Tape, vars: &PolicyVars, cfg: &PolicyConfig, l: usize, x: Var) -> Var {
    let normed = layer_norm(tape, vars, &format!("enc{l}.ln1"), x);
    let a = attention(tape, vars, cfg, &format!("enc{l}.attn"), normed, normed, None);
    let x = tape.add(x, a);
    let normed = layer_norm(tape, vars, &format!("enc{l}.ln2"), x);
    let m = mlp_block(tape, vars, &format!("enc{l}.mlp"), normed);
    tape.add(x, m)
}

/// Encode per-agent embeddings into refined observations and per-agent
/// values. No positional encoding on the agent axis, so the map is
/// permutation-equivariant.
pub fn encode(
    tape: &mut Tape,
    vars: &PolicyVars,
    cfg: &PolicyConfig,
    embeddings: &[Var],
) -> (Var, Var) {
    let mut x = tape.stack_rows(embeddings);
    for l in 0..cfg.n_enc {
        x = encoder_block(tape, vars, cfg, l, x);
    }
    let refined = layer_norm(tape, vars, "enc.lnf", x);
    let v = linear(tape, vars, "val.l0", refined);
    let v = tape.relu(v);
    let values = linear(tape, vars, "val.l1", v);
    (refined, values)
}

/// Additive causal mask: position r may attend to positions j <= r.
pub fn causal_mask(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for r in 0..n {
        for j in (r + 1)..n {
            m[r * n + j] = -1e30;
        }
    }
    m
}

/// Teacher-forced decode over the whole agent sequence. Token i is the
/// embedding of `actions[i - 1]` (start token at i = 0); output row i holds
/// the 5 action logits for agent i.
pub fn decode(
    tape: &mut Tape,
    vars: &PolicyVars,
    cfg: &PolicyConfig,
    refined: Var,
    actions: &[usize],
) -> Var {
    let n = tape.shape(refined)[0];
    assert!(actions.len() >= n - 1, "need at least n-1 prior actions");
    let table = vars.get("dec.embed");
    let mut tokens = Vec::with_capacity(n);
    tokens.push(tape.embedding(table, START_TOKEN));
    for &a in actions.iter().take(n - 1) {
        assert!(a < N_ACTIONS);
        tokens.push(tape.embedding(table, a));
    }
    let mut y = tape.stack_rows(&tokens);
    let mask = causal_mask(n);
    for l in 0..cfg.n_dec {
        let normed = layer_norm(tape, vars, &format!("dec{l}.ln1"), y);
        let a = attention(tape, vars, cfg, &format!("dec{l}.self"), normed, normed, Some(&mask));
        y = tape.add(y, a);
        let normed = layer_norm(tape, vars, &format!("dec{l}.ln2"), y);
        let a = attention(tape, vars, cfg, &format!("dec{l}.cross"), normed, refined, None);
        y = tape.add(y, a);
        let normed = layer_norm(tape, vars, &format!("dec{l}.ln3"), y);
        let m = mlp_block(tape, vars, &format!("dec{l}.mlp"), normed);
        y = tape.add(y, m);
    }
    let y = layer_norm(tape, vars, "dec.lnf", y);
    let h = linear(tape, vars, "head.l0", y);
    let h = tape.relu(h);
    linear(tape, vars, "head.l1", h)
}

/// Per-agent log-probabilities of the taken actions from teacher-forced
/// logits: row i of `decode` output, log-softmax, indexed at `actions[i]`.
pub fn logprobs_from_logits(tape: &mut Tape, logits: Var, actions: &[usize]) -> Vec<Var> {
    let n = tape.shape(logits)[0];
    let probs = tape.softmax_rows(logits);
    let logp = tape.log(probs);
    (0..n)
        .map(|i| {
            let row = tape.row(logp, i);
            tape.slice(row, actions[i], actions[i] + 1)
        })
        .collect()
}

// ---- tabular order-invariance verification ----

#[derive(Debug, Error)]
pub enum JointError {
    #[error("joint distribution sums to {0}, not 1")]
    NotNormalized(f64),
}

/// Factorize an explicit joint distribution over `A^n` into conditionals
/// under decision order `sigma`, recompose the product, repeat for `nu`,
/// and return the max absolute deviation over action tuples.
pub fn verify_order_invariance(
    joint: &[f64],
    n: usize,
    n_actions: usize,
    sigma: &[usize],
    nu: &[usize],
) -> Result<f64, JointError> {
    let total: f64 = joint.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(JointError::NotNormalized(total));
    }
    assert_eq!(joint.len(), n_actions.pow(n as u32));
    let p_sigma = recompose_under_order(joint, n, n_actions, sigma);
    let p_nu = recompose_under_order(joint, n, n_actions, nu);
    Ok(p_sigma
        .iter()
        .zip(&p_nu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Chain-rule recomposition: for each tuple, multiply the exact conditionals
/// P(a_{order[k]} | a_{order[0..k]}) computed from the joint's marginals.
fn recompose_under_order(joint: &[f64], n: usize, n_actions: usize, order: &[usize]) -> Vec<f64> {
    assert_eq!(order.len(), n);
    let index_of = |tuple: &[usize]| -> usize {
        tuple.iter().fold(0, |acc, &a| acc * n_actions + a)
    };
    // marginal over the agents fixed in `fixed`: sum of joint entries
    // consistent with the partial assignment
    let marginal = |fixed: &[(usize, usize)]| -> f64 {
        let mut sum = 0.0;
        let mut tuple = vec![0usize; n];
        let count = n_actions.pow(n as u32);
        'outer: for flat in 0..count {
            let mut rem = flat;
            for k in (0..n).rev() {
                tuple[k] = rem % n_actions;
                rem /= n_actions;
            }
            for &(agent, val) in fixed {
                if tuple[agent] != val {
                    continue 'outer;
                }
            }
            sum += joint[index_of(&tuple)];
        }
        sum
    };
    let count = n_actions.pow(n as u32);
    let mut out = vec![0.0; count];
    let mut tuple = vec![0usize; n];
    for flat in 0..count {
        let mut rem = flat;
        for k in (0..n).rev() {
            tuple[k] = rem % n_actions;
            rem /= n_actions;
        }
        let mut prob = 1.0;
        let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(n);
        for &agent in order {
            let denom = marginal(&fixed);
            fixed.push((agent, tuple[agent]));
            let numer = marginal(&fixed);
            if denom == 0.0 {
                prob = 0.0;
                break;
            }
            prob *= numer / denom;
        }
        out[flat] = prob;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_cfg() -> PolicyConfig {
        PolicyConfig { fov: 5, d: 8, n_heads: 2, n_enc: 1, n_dec: 1, c1: 2, c2: 3 }
    }

    fn rand_obs(rng: &mut ChaCha8Rng, cfg: &PolicyConfig) -> Vec<f64> {
        (0..N_CHANNELS * cfg.fov * cfg.fov).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn extractor_deterministic() {
        let cfg = toy_cfg();
        let store = init_params(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs = rand_obs(&mut rng, &cfg);
        let run = || {
            let mut tape = Tape::new();
            let vars = insert_params(&mut tape, &store);
            let h = tape.input(&[cfg.d], vec![0.0; cfg.d]);
            let c = tape.input(&[cfg.d], vec![0.0; cfg.d]);
            let (z, _, _) = extract_features(&mut tape, &vars, &cfg, &obs, h, c);
            tape.value(z).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_params_zero_embedding() {
        let cfg = toy_cfg();
        let mut store = init_params(&cfg, 0);
        for v in &mut store.values {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs = rand_obs(&mut rng, &cfg);
        let mut tape = Tape::new();
        let vars = insert_params(&mut tape, &store);
        let h = tape.input(&[cfg.d], vec![0.0; cfg.d]);
        let c = tape.input(&[cfg.d], vec![0.0; cfg.d]);
        let (z, _, _) = extract_features(&mut tape, &vars, &cfg, &obs, h, c);
        // all-zero weights: LSTM input is 0, gates are 0.5, candidate 0
        assert!(tape.value(z).iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn encoder_permutation_equivariant() {
        let cfg = toy_cfg();
        let store = init_params(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 3;
        let zs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let vars = insert_params(&mut tape, &store);
            let vs: Vec<Var> = order.iter().map(|&i| tape.input(&[cfg.d], zs[i].clone())).collect();
            let (refined, values) = encode(&mut tape, &vars, &cfg, &vs);
            (tape.value(refined).to_vec(), tape.value(values).to_vec())
        };
        let (r_id, v_id) = run(&[0, 1, 2]);
        let (r_pm, v_pm) = run(&[2, 0, 1]);
        let d = cfg.d;
        for (out_row, &src) in [2usize, 0, 1].iter().enumerate() {
            for j in 0..d {
                assert!((r_pm[out_row * d + j] - r_id[src * d + j]).abs() < 1e-12);
            }
            assert!((v_pm[out_row] - v_id[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_normalized() {
        // softmax rows of a random score matrix sum to one by construction;
        // checked through the public surface via a single-agent encode
        let cfg = toy_cfg();
        let store = init_params(&cfg, 2);
        let mut tape = Tape::new();
        let vars = insert_params(&mut tape, &store);
        let z = tape.input(&[cfg.d], vec![0.3; cfg.d]);
        let (refined, values) = encode(&mut tape, &vars, &cfg, &[z]);
        assert_eq!(tape.shape(refined), &[1, cfg.d]);
        assert_eq!(tape.shape(values), &[1, 1]);
    }

    #[test]
    fn decoder_causality() {
        let cfg = toy_cfg();
        let store = init_params(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 3;
        let zs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let run = |actions: &[usize]| {
            let mut tape = Tape::new();
            let vars = insert_params(&mut tape, &store);
            let vs: Vec<Var> = zs.iter().map(|z| tape.input(&[cfg.d], z.clone())).collect();
            let (refined, _) = encode(&mut tape, &vars, &cfg, &vs);
            let logits = decode(&mut tape, &vars, &cfg, refined, actions);
            tape.value(logits).to_vec()
        };
        let base = run(&[1, 2, 0]);
        let perturbed = run(&[1, 2, 4]); // change agent 3's action
        // logits for agents 1..=2 must be bit-identical
        assert_eq!(&base[..2 * N_ACTIONS], &perturbed[..2 * N_ACTIONS]);
        let perturbed2 = run(&[1, 4, 0]); // change agent 2's action
        assert_eq!(&base[..N_ACTIONS], &perturbed2[..N_ACTIONS]);
    }

    #[test]
    fn mask_is_strictly_lower_triangular() {
        let m = causal_mask(3);
        for r in 0..3 {
            for j in 0..3 {
                if r < j {
                    assert!(m[r * 3 + j] < -1e20);
                } else {
                    assert_eq!(m[r * 3 + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn logprob_normalized_over_actions() {
        let cfg = toy_cfg();
        let store = init_params(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zs: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut total = 0.0;
        for a in 0..N_ACTIONS {
            let mut tape = Tape::new();
            let vars = insert_params(&mut tape, &store);
            let vs: Vec<Var> = zs.iter().map(|z| tape.input(&[cfg.d], z.clone())).collect();
            let (refined, _) = encode(&mut tape, &vars, &cfg, &vs);
            let logits = decode(&mut tape, &vars, &cfg, refined, &[2, 0]);
            let lps = logprobs_from_logits(&mut tape, logits, &[2, a]);
            total += tape.value(lps[1])[0].exp();
        }
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn order_invariance_trivial_cases() {
        // same permutation: zero deviation
        let joint = vec![1.0 / 25.0; 25];
        let dev = verify_order_invariance(&joint, 2, 5, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(dev, 0.0);
        // uniform joint under swapped orders
        let dev = verify_order_invariance(&joint, 2, 5, &[0, 1], &[1, 0]).unwrap();
        assert!(dev < 1e-15);
    }

    #[test]
    fn order_invariance_random_joints() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10 {
            let mut joint: Vec<f64> = (0..125).map(|_| rng.gen_range(0.0..1.0)).collect();
            let z: f64 = joint.iter().sum();
            joint.iter_mut().for_each(|p| *p /= z);
            let dev = verify_order_invariance(&joint, 3, 5, &[0, 1, 2], &[2, 1, 0]).unwrap();
            assert!(dev < 1e-12, "deviation {dev}");
        }
    }

    #[test]
    fn unnormalized_joint_rejected() {
        let joint = vec![0.1; 25];
        assert!(matches!(
            verify_order_invariance(&joint, 2, 5, &[0, 1], &[1, 0]),
            Err(JointError::NotNormalized(_))
        ));
    }
}
