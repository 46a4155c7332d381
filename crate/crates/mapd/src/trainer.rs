//! Training loop: on-policy rollouts scored with generalized advantage
//! estimation, a clipped policy-gradient update through the decoder, a
//! temporal-difference loss on the encoder value head against a frozen
//! target copy, and a behavioral-cloning term against the planner.

use crate::autodiff::Tape;
use crate::env::{reset, step, Event, Order, RewardConfig, SimState};
use crate::expert::expert_actions;
use crate::map::GridMap;
use crate::obs::{build_observation, predicted_paths, ObsContext};
use crate::policy::infer::{
    encode_infer, extract_features_infer, sample_joint, HiddenState, SampleMode,
};
use crate::policy::{
    decode, encode, extract_features, init_params, insert_params, logprobs_from_logits,
    ParamStore, PolicyConfig,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iter}: {loss}")]
    Diverged { iter: usize, loss: f64 },
    #[error("environment error: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("observation error: {0}")]
    Obs(#[from] crate::obs::ObsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_agents: usize,
    pub n_envs: usize,
    /// Rollout segment length per environment per iteration.
    pub segment_len: usize,
    pub iterations: usize,
    pub gamma: f64,
    pub lam_gae: f64,
    pub eps_clip: f64,
    pub lr: f64,
    pub bc_weight: f64,
    /// Timesteps per policy-gradient minibatch.
    pub b_rl: usize,
    /// Timesteps per behavioral-cloning minibatch.
    pub b_il: usize,
    /// Behavioral-cloning optimizer steps per iteration.
    pub il_steps: usize,
    /// Capacity of the replay buffer the cloning term samples from.
    pub il_buffer: usize,
    /// Sync the frozen value target every this many updates.
    pub target_sync: usize,
    pub orders_per_agent: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub fov: usize,
    pub d: usize,
    pub n_heads: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub c1: usize,
    pub c2: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        TrainConfig {
            n_agents: 4,
            n_envs: 2,
            segment_len: 32,
            iterations: 10,
            gamma: 0.99,
            lam_gae: 0.95,
            eps_clip: 0.2,
            lr: 3e-4,
            bc_weight: 0.5,
            b_rl: 1024,
            b_il: 512,
            il_steps: 1,
            il_buffer: 4096,
            target_sync: 10,
            orders_per_agent: 16,
            checkpoint_every: 5,
            seed: 0,
            fov: p.fov,
            d: p.d,
            n_heads: p.n_heads,
            n_enc: p.n_enc,
            n_dec: p.n_dec,
            c1: p.c1,
            c2: p.c2,
        }
    }
}

impl TrainConfig {
    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            fov: self.fov,
            d: self.d,
            n_heads: self.n_heads,
            n_enc: self.n_enc,
            n_dec: self.n_dec,
            c1: self.c1,
            c2: self.c2,
        }
    }
}

/// One collected timestep across all agents of one environment.
#[derive(Clone)]
pub struct StepRecord {
    pub obs: Vec<Vec<f64>>,
    pub hidden_pre: Vec<HiddenState>,
    pub actions: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub joint_reward: f64,
    pub terminal: bool,
    pub sim: SimState,
}

/// Generalized advantage estimation over a single segment. `values` has one
/// trailing bootstrap entry (zero at a terminal). Returns (advantages,
/// returns) where returns are advantages plus baselines.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    assert_eq!(values.len(), t_len + 1);
    let mut adv = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lam * acc;
        adv[t] = acc;
    }
    let ret: Vec<f64> = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zero: Vec<Vec<f64>> = store.values.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zero.clone(), v: zero }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), store.values.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, g) in grads.iter().enumerate() {
            let p = &mut store.values[k];
            for j in 0..p.len() {
                let m = &mut self.m[k][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                let v = &mut self.v[k][j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                let mh = *m / bc1;
                let vh = *v / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterMetrics {
    pub iter: usize,
    pub enc_loss: f64,
    pub dec_loss: f64,
    pub bc_loss: f64,
    pub mean_joint_reward: f64,
    pub throughput: f64,
    pub collision_rate: f64,
}

struct RolloutEnv {
    state: SimState,
    hidden: Vec<HiddenState>,
    ctx: ObsContext,
}

fn obs_for_state(
    state: &SimState,
    ctx: &ObsContext,
    fov: usize,
) -> Result<Vec<Vec<f64>>, crate::obs::ObsError> {
    let paths = predicted_paths(state);
    (0..state.n_agents())
        .map(|i| build_observation(state, i, fov, &paths, ctx).map(|o| o.as_slice().to_vec()))
        .collect()
}

fn collect_segment(
    env: &mut RolloutEnv,
    store: &ParamStore,
    pcfg: &PolicyConfig,
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
    rng: &mut ChaCha8Rng,
    collisions: &mut usize,
    goals_before: &mut u64,
) -> Result<Vec<StepRecord>, TrainError> {
    let mut records = Vec::with_capacity(cfg.segment_len);
    *goals_before = env.state.goals_completed;
    for k in 0..cfg.segment_len {
        let obs = obs_for_state(&env.state, &env.ctx, cfg.fov)?;
        let hidden_pre = env.hidden.clone();
        let sim = env.state.clone();
        let decision =
            sample_joint(store, pcfg, &obs, &mut env.hidden, SampleMode::Sample, rng);
        let actions: Vec<crate::env::Action> = decision
            .actions
            .iter()
            .map(|&a| crate::env::Action::from_index(a).unwrap())
            .collect();
        let out = step(&mut env.state, &actions, reward_cfg)?;
        *collisions += out.events.iter().filter(|e| **e == Event::Collided).count();
        let joint_reward = out.rewards.iter().sum::<f64>() / out.rewards.len() as f64;
        records.push(StepRecord {
            obs,
            hidden_pre,
            actions: decision.actions,
            logprobs: decision.logprobs,
            values: decision.values,
            joint_reward,
            terminal: k + 1 == cfg.segment_len,
            sim,
        });
    }
    Ok(records)
}

/// Per-agent bootstrap values for the record after `idx` under the frozen
/// target parameters; zero at segment ends.
fn target_next_values(
    records: &[StepRecord],
    idx: usize,
    target: &ParamStore,
    pcfg: &PolicyConfig,
) -> Vec<f64> {
    let n = records[idx].obs.len();
    if records[idx].terminal {
        return vec![0.0; n];
    }
    let next = &records[idx + 1];
    let mut hidden = next.hidden_pre.clone();
    let feats: Vec<Vec<f64>> = next
        .obs
        .iter()
        .zip(hidden.iter_mut())
        .map(|(o, h)| extract_features_infer(target, pcfg, o, h))
        .collect();
    let (_, values) = encode_infer(target, pcfg, &feats);
    values
}

/// One clipped surrogate term: min(r·Â, clip(r, 1±ε)·Â) with the ratio
/// r = exp(logp − old_logp). The surrounding loss negates the mean of
/// these terms.
pub fn ppo_term(
    tape: &mut Tape,
    logp: crate::autodiff::Var,
    old_logp: f64,
    advantage: f64,
    eps_clip: f64,
) -> crate::autodiff::Var {
    let shifted = tape.add_scalar(logp, -old_logp);
    let ratio = tape.exp(shifted);
    // clamp(ratio, 1-eps, 1+eps) via two hinge terms
    let lo = 1.0 - eps_clip;
    let hi = 1.0 + eps_clip;
    let above_lo = tape.add_scalar(ratio, -lo);
    let above_lo = tape.relu(above_lo);
    let above_hi = tape.add_scalar(ratio, -hi);
    let above_hi = tape.relu(above_hi);
    let clipped = tape.sub(above_lo, above_hi);
    let clipped = tape.add_scalar(clipped, lo);
    let term_a = tape.scale(ratio, advantage);
    let term_b = tape.scale(clipped, advantage);
    // min(a, b) = a - relu(a - b)
    let gap = tape.sub(term_a, term_b);
    let gap = tape.relu(gap);
    tape.sub(term_a, gap)
}

/// Shift and scale a batch of advantages to zero mean and unit variance,
/// keeping the policy-gradient magnitude independent of the reward scale.
fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Loss values and per-parameter gradients from one minibatch tape.
pub struct Losses {
    pub enc: f64,
    pub dec: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Build one tape over the sampled timesteps, with the encoder
/// temporal-difference loss and the clipped policy-gradient loss sharing
/// the extraction and encoding subgraph.
#[allow(clippy::too_many_arguments)]
pub fn rl_losses(
    store: &ParamStore,
    target: &ParamStore,
    pcfg: &PolicyConfig,
    cfg: &TrainConfig,
    records: &[StepRecord],
    sample: &[usize],
    advantages: &[f64],
) -> Losses {
    let mut tape = Tape::new();
    let vars = insert_params(&mut tape, store);
    let mut enc_terms = Vec::new();
    let mut dec_terms = Vec::new();
    for &idx in sample {
        let rec = &records[idx];
        let n = rec.obs.len();
        let mut zs = Vec::with_capacity(n);
        for (i, obs) in rec.obs.iter().enumerate() {
            let h = tape.input(&[pcfg.d], rec.hidden_pre[i].h.clone());
            let c = tape.input(&[pcfg.d], rec.hidden_pre[i].c.clone());
            let (z, _, _) = extract_features(&mut tape, &vars, pcfg, obs, h, c);
            zs.push(z);
        }
        let (refined, values) = encode(&mut tape, &vars, pcfg, &zs);

        let bootstrap = target_next_values(records, idx, target, pcfg);
        for i in 0..n {
            let target_v = rec.joint_reward + cfg.gamma * bootstrap[i];
            let v_i = tape.row(values, i);
            let diff = tape.add_scalar(v_i, -target_v);
            let sq = tape.mul(diff, diff);
            enc_terms.push(sq);
        }

        let logits = decode(&mut tape, &vars, pcfg, refined, &rec.actions);
        let lps = logprobs_from_logits(&mut tape, logits, &rec.actions);
        let a_t = advantages[idx];
        for (i, lp) in lps.iter().enumerate() {
            dec_terms.push(ppo_term(&mut tape, *lp, rec.logprobs[i], a_t, cfg.eps_clip));
        }
    }
    let enc_stack = tape.stack_rows(&enc_terms);
    let enc_loss = tape.mean(enc_stack);
    let dec_stack = tape.stack_rows(&dec_terms);
    let dec_mean = tape.mean(dec_stack);
    let dec_loss = tape.scale(dec_mean, -1.0);
    let total = tape.add(enc_loss, dec_loss);
    tape.backward(total);
    let grads = vars.all().iter().map(|&v| tape.grad(v).to_vec()).collect();
    Losses {
        enc: tape.scalar_value(enc_loss),
        dec: tape.scalar_value(dec_loss),
        grads,
    }
}

/// Behavioral cloning on planner relabels: teacher-forced decode under the
/// expert joint action, negative mean log-likelihood.
pub fn bc_losses(
    store: &ParamStore,
    pcfg: &PolicyConfig,
    cfg: &TrainConfig,
    records: &[StepRecord],
    sample: &[usize],
) -> Losses {
    let mut tape = Tape::new();
    let vars = insert_params(&mut tape, store);
    let mut terms = Vec::new();
    for &idx in sample {
        let rec = &records[idx];
        let expert: Vec<usize> =
            expert_actions(&rec.sim).iter().map(|a| a.index()).collect();
        let n = rec.obs.len();
        let mut zs = Vec::with_capacity(n);
        for (i, obs) in rec.obs.iter().enumerate() {
            let h = tape.input(&[pcfg.d], rec.hidden_pre[i].h.clone());
            let c = tape.input(&[pcfg.d], rec.hidden_pre[i].c.clone());
            let (z, _, _) = extract_features(&mut tape, &vars, pcfg, obs, h, c);
            zs.push(z);
        }
        let (refined, _) = encode(&mut tape, &vars, pcfg, &zs);
        let logits = decode(&mut tape, &vars, pcfg, refined, &expert);
        let lps = logprobs_from_logits(&mut tape, logits, &expert);
        terms.extend(lps);
    }
    let stack = tape.stack_rows(&terms);
    let mean = tape.mean(stack);
    let neg = tape.scale(mean, -1.0);
    let weighted = tape.scale(neg, cfg.bc_weight);
    tape.backward(weighted);
    let grads = vars.all().iter().map(|&v| tape.grad(v).to_vec()).collect();
    Losses { enc: 0.0, dec: tape.scalar_value(neg), grads }
}

fn sample_indices(total: usize, want: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(rng);
    idx.truncate(want.min(total));
    idx
}

pub struct TrainOutput {
    pub store: ParamStore,
    pub metrics: Vec<IterMetrics>,
}

/// Run the full training loop, writing `metrics.jsonl` and periodic
/// checkpoints under `out_dir`.
pub fn train(
    map: &GridMap,
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
    out_dir: &Path,
) -> Result<TrainOutput, TrainError> {
    train_with_orders(map, cfg, reward_cfg, out_dir, None)
}

/// Like `train`, but environments replay `fixed_orders` instead of sampling
/// their own order streams.
pub fn train_with_orders(
    map: &GridMap,
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
    out_dir: &Path,
    fixed_orders: Option<&[Vec<Order>]>,
) -> Result<TrainOutput, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let pcfg = cfg.policy();
    pcfg.validate();
    let mut store = init_params(&pcfg, cfg.seed);
    let mut target = store.clone();
    let mut opt = Adam::new(&store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));

    let mut envs = Vec::with_capacity(cfg.n_envs);
    for e in 0..cfg.n_envs {
        let seed = cfg.seed.wrapping_add(e as u64);
        let per_agent: Vec<Vec<Order>> = match fixed_orders {
            Some(o) => o.to_vec(),
            None => {
                let stream =
                    crate::env::gen_orders(map, cfg.n_agents * cfg.orders_per_agent, seed);
                let mut per_agent: Vec<Vec<Order>> = vec![Vec::new(); cfg.n_agents];
                for (k, o) in stream.into_iter().enumerate() {
                    per_agent[k % cfg.n_agents].push(o);
                }
                per_agent
            }
        };
        let state = reset(map, cfg.n_agents, &per_agent, seed)?;
        envs.push(RolloutEnv {
            state,
            hidden: (0..cfg.n_agents).map(|_| HiddenState::zeros(pcfg.d)).collect(),
            ctx: ObsContext::new(map),
        });
    }

    std::fs::write(
        out_dir.join("policy.json"),
        serde_json::to_string_pretty(&pcfg)?,
    )?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::File::create(&metrics_path)?;
    let mut all_metrics = Vec::new();
    let mut updates = 0usize;
    // states visited by the policy, labeled on the fly by the planner; the
    // cloning term resamples them across iterations so each record is
    // trained on more than once
    let mut replay: Vec<StepRecord> = Vec::new();

    for iter in 0..cfg.iterations {
        let mut records: Vec<StepRecord> = Vec::new();
        let mut advantages: Vec<f64> = Vec::new();
        let mut collisions = 0usize;
        let mut goals = 0u64;
        let mut steps_total = 0usize;
        for env in envs.iter_mut() {
            let mut goals_before = 0;
            let seg = collect_segment(
                env,
                &store,
                &pcfg,
                cfg,
                reward_cfg,
                &mut rng,
                &mut collisions,
                &mut goals_before,
            )?;
            goals += env.state.goals_completed - goals_before;
            steps_total += seg.len();
            let rewards: Vec<f64> = seg.iter().map(|r| r.joint_reward).collect();
            let mut values: Vec<f64> = seg
                .iter()
                .map(|r| r.values.iter().sum::<f64>() / r.values.len() as f64)
                .collect();
            values.push(0.0);
            let (adv, _) = compute_gae(&rewards, &values, cfg.gamma, cfg.lam_gae);
            records.extend(seg);
            advantages.extend(adv);
        }
        let mean_joint_reward =
            records.iter().map(|r| r.joint_reward).sum::<f64>() / records.len() as f64;
        normalize_advantages(&mut advantages);

        let rl_sample = sample_indices(records.len(), cfg.b_rl, &mut rng);
        let rl = rl_losses(&store, &target, &pcfg, cfg, &records, &rl_sample, &advantages);
        let total_rl = rl.enc + rl.dec;
        if !total_rl.is_finite() {
            let _ = store.save(&out_dir.join("diverged"));
            return Err(TrainError::Diverged { iter, loss: total_rl });
        }
        opt.step(&mut store, &rl.grads);
        updates += 1;
        if updates % cfg.target_sync == 0 {
            target = store.clone();
        }

        replay.extend(records.iter().cloned());
        if replay.len() > cfg.il_buffer.max(cfg.b_il) {
            let excess = replay.len() - cfg.il_buffer.max(cfg.b_il);
            replay.drain(0..excess);
        }
        let mut bc = Losses { enc: 0.0, dec: 0.0, grads: Vec::new() };
        for _ in 0..cfg.il_steps.max(1) {
            let il_sample = sample_indices(replay.len(), cfg.b_il, &mut rng);
            bc = bc_losses(&store, &pcfg, cfg, &replay, &il_sample);
            if !bc.dec.is_finite() {
                let _ = store.save(&out_dir.join("diverged"));
                return Err(TrainError::Diverged { iter, loss: bc.dec });
            }
            opt.step(&mut store, &bc.grads);
            updates += 1;
            if updates % cfg.target_sync == 0 {
                target = store.clone();
            }
        }

        let m = IterMetrics {
            iter,
            enc_loss: rl.enc,
            dec_loss: rl.dec,
            bc_loss: bc.dec,
            mean_joint_reward,
            throughput: goals as f64 / steps_total as f64,
            collision_rate: collisions as f64 / (steps_total * cfg.n_agents) as f64,
        };
        writeln!(metrics_file, "{}", serde_json::to_string(&m)?)?;
        all_metrics.push(m);

        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            store.save(&out_dir.join(format!("ckpt_{:05}", iter + 1)))?;
        }
    }
    store.save(&out_dir.join("final"))?;
    Ok(TrainOutput { store, metrics: all_metrics })
}

pub fn checkpoint_stem(out_dir: &Path) -> PathBuf {
    out_dir.join("final")
}
