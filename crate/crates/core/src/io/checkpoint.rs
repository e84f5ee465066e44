//! Versioned binary snapshot of a training run.
//!
//! Layout: the magic bytes `SDQLCKPT`, a `u32` format version, a `u32`
//! section count, then one `(tag: [u8; 4], offset: u64, length: u64)` entry
//! per section followed by the section payloads in table order. Integers and
//! doubles are little-endian; doubles are stored bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;

use crate::error::{Result, SdqlError};
use crate::nncore::{AdamState, HiddenActivation, MlpParams, OutputActivation, ParamGrads};
use crate::rl_modules::{ModuleConfig, QModule, StageModule};
use crate::staged_mdp::{Action, ActionSpace, SdqlRng, StagedEnv, Transition};
use crate::trainer::{Diagnostics, Progress, ReplayBuffer, StackedPolicy, Trainer};

use super::binary::{Reader, Writer};
use super::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"SDQLCKPT";
pub const FORMAT_VERSION: u32 = 1;

const SECTIONS: [&[u8; 4]; 5] = [b"CONF", b"PROG", b"RNGS", b"MODS", b"BUFS"];

/// Everything needed to resume training or to evaluate the policy.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub progress: Progress,
    pub diagnostics: Diagnostics,
    pub rng: SdqlRng,
    pub modules: Vec<StageModule>,
    /// Observation width the modules were built for.
    pub obs_dim: usize,
    pub buffers: Vec<ReplayBuffer>,
}

impl Checkpoint {
    pub fn from_trainer<E: StagedEnv>(config: &RunConfig, trainer: &Trainer<E>) -> Self {
        Self {
            config: config.clone(),
            progress: trainer.progress().clone(),
            diagnostics: trainer.diagnostics().clone(),
            rng: trainer.rng().clone(),
            modules: trainer.policy().modules.clone(),
            obs_dim: trainer.env().obs_dim(),
            buffers: trainer.buffers().to_vec(),
        }
    }

    pub fn policy(&self) -> StackedPolicy {
        StackedPolicy {
            modules: self.modules.clone(),
            stages: self.config.stages.clone(),
        }
    }

    pub fn into_trainer<E: StagedEnv>(self, env: E) -> Result<Trainer<E>> {
        if env.obs_dim() != self.obs_dim {
            return Err(SdqlError::Format(format!(
                "checkpoint built for {}-dimensional observations, environment has {}",
                self.obs_dim,
                env.obs_dim()
            )));
        }
        let policy = self.policy();
        Trainer::from_parts(
            env,
            self.config.trainer_config(),
            policy,
            self.buffers,
            self.rng,
            self.progress,
            self.diagnostics,
        )
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_parts(
            &self.config,
            &self.progress,
            &self.diagnostics,
            &self.rng,
            &self.modules,
            self.obs_dim,
            &self.buffers,
        )
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let sections = read_sections(bytes)?;
        let mut r = Reader::new(sections[0], "config section");
        let text = std::str::from_utf8(r.bytes()?)
            .map_err(|e| SdqlError::Format(format!("config section is not UTF-8: {e}")))?;
        r.finish()?;
        let config = RunConfig::parse(text)?;

        let mut r = Reader::new(sections[1], "progress section");
        let progress = Progress {
            phase: r.usize()?,
            episode: r.usize()?,
            episodes_done: r.u64()?,
            env_steps: r.u64()?,
            learn_calls: r.u64s()?,
        };
        let diagnostics = Diagnostics {
            truncation_checks: r.u64()?,
            truncation_violations: r.u64()?,
            stage_transitions: r.u64()?,
            terminal_steps: r.u64()?,
        };
        r.finish()?;

        let mut r = Reader::new(sections[2], "rng section");
        let rng = read_rng(&mut r)?;
        r.finish()?;

        let mut r = Reader::new(sections[3], "module section");
        let obs_dim = r.usize()?;
        let n = r.usize()?;
        if n != config.modules.len() {
            return Err(SdqlError::Format(format!(
                "{n} stored modules but the configuration lists {}",
                config.modules.len()
            )));
        }
        let modules = config
            .modules
            .iter()
            .map(|c| read_module(&mut r, c, obs_dim))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;

        let mut r = Reader::new(sections[4], "buffer section");
        let n = r.usize()?;
        let buffers = (0..n).map(|_| read_buffer(&mut r)).collect::<Result<Vec<_>>>()?;
        r.finish()?;

        Ok(Self {
            config,
            progress,
            diagnostics,
            rng,
            modules,
            obs_dim,
            buffers,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }
}

/// Encodes a live trainer without cloning its buffers.
pub fn encode_trainer<E: StagedEnv>(config: &RunConfig, trainer: &Trainer<E>) -> Result<Vec<u8>> {
    encode_parts(
        config,
        trainer.progress(),
        trainer.diagnostics(),
        trainer.rng(),
        &trainer.policy().modules,
        trainer.env().obs_dim(),
        trainer.buffers(),
    )
}

pub fn save_trainer<E: StagedEnv>(path: &Path, config: &RunConfig, trainer: &Trainer<E>) -> Result<()> {
    write_atomic(path, &encode_trainer(config, trainer)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn encode_parts(
    config: &RunConfig,
    progress: &Progress,
    diagnostics: &Diagnostics,
    rng: &SdqlRng,
    modules: &[StageModule],
    obs_dim: usize,
    buffers: &[ReplayBuffer],
) -> Result<Vec<u8>> {
    let mut conf = Writer::default();
    conf.bytes(config.to_toml()?.as_bytes());

    let mut prog = Writer::default();
    prog.usize(progress.phase);
    prog.usize(progress.episode);
    prog.u64(progress.episodes_done);
    prog.u64(progress.env_steps);
    prog.u64s(&progress.learn_calls);
    prog.u64(diagnostics.truncation_checks);
    prog.u64(diagnostics.truncation_violations);
    prog.u64(diagnostics.stage_transitions);
    prog.u64(diagnostics.terminal_steps);

    let mut rngs = Writer::default();
    write_rng(&mut rngs, rng);

    let mut mods = Writer::default();
    mods.usize(obs_dim);
    mods.usize(modules.len());
    for m in modules {
        write_module(&mut mods, m);
    }

    let mut bufs = Writer::default();
    bufs.usize(buffers.len());
    for b in buffers {
        write_buffer(&mut bufs, b);
    }

    let payloads = [conf.buf, prog.buf, rngs.buf, mods.buf, bufs.buf];
    let header_len = MAGIC.len() + 4 + 4 + SECTIONS.len() * (4 + 8 + 8);
    let total = header_len + payloads.iter().map(Vec::len).sum::<usize>();
    let mut out = Writer { buf: Vec::with_capacity(total) };
    out.buf.extend_from_slice(MAGIC);
    out.u32(FORMAT_VERSION);
    out.u32(SECTIONS.len() as u32);
    let mut offset = header_len;
    for (tag, p) in SECTIONS.iter().zip(&payloads) {
        out.buf.extend_from_slice(*tag);
        out.usize(offset);
        out.usize(p.len());
        offset += p.len();
    }
    for p in &payloads {
        out.buf.extend_from_slice(p);
    }
    Ok(out.buf)
}

fn read_sections(bytes: &[u8]) -> Result<Vec<&[u8]>> {
    let mut r = Reader::new(bytes, "checkpoint header");
    let mut magic = [0u8; 8];
    for b in magic.iter_mut() {
        *b = r.u8()?;
    }
    if &magic != MAGIC {
        return Err(SdqlError::Format("not an SDQL checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(SdqlError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    if count != SECTIONS.len() {
        return Err(SdqlError::Format(format!(
            "expected {} sections, found {count}",
            SECTIONS.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut expected_offset = MAGIC.len() + 4 + 4 + count * 20;
    for tag in SECTIONS {
        let mut got = [0u8; 4];
        for b in got.iter_mut() {
            *b = r.u8()?;
        }
        if &got != tag {
            return Err(SdqlError::Format(format!(
                "section {:?} found where {:?} was expected",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(tag)
            )));
        }
        let offset = r.usize()?;
        let len = r.usize()?;
        if offset != expected_offset || offset.checked_add(len).is_none_or(|end| end > bytes.len()) {
            return Err(SdqlError::Format(format!(
                "section {:?} has an invalid extent",
                String::from_utf8_lossy(tag)
            )));
        }
        out.push(&bytes[offset..offset + len]);
        expected_offset = offset + len;
    }
    if expected_offset != bytes.len() {
        return Err(SdqlError::Format("trailing bytes after the last section".into()));
    }
    Ok(out)
}

fn write_rng(w: &mut Writer, rng: &SdqlRng) {
    w.buf.extend_from_slice(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
}

fn read_rng(r: &mut Reader) -> Result<SdqlRng> {
    let mut seed = [0u8; 32];
    for b in seed.iter_mut() {
        *b = r.u8()?;
    }
    let mut rng = SdqlRng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    Ok(rng)
}

fn write_mlp(w: &mut Writer, p: &MlpParams) {
    let sizes: Vec<u64> = p.layer_sizes.iter().map(|&s| s as u64).collect();
    w.u64s(&sizes);
    w.u8(match p.hidden_activation {
        HiddenActivation::Relu => 0,
        HiddenActivation::Tanh => 1,
    });
    w.u8(match p.output_activation {
        OutputActivation::Linear => 0,
        OutputActivation::Tanh => 1,
    });
    for l in &p.layers {
        w.f64s(&l.weights);
        w.f64s(&l.biases);
    }
}

fn read_mlp(r: &mut Reader, expected: &MlpParams) -> Result<MlpParams> {
    let sizes: Vec<usize> = r.u64s()?.into_iter().map(|s| s as usize).collect();
    let hidden = match r.u8()? {
        0 => HiddenActivation::Relu,
        1 => HiddenActivation::Tanh,
        b => return Err(SdqlError::Format(format!("unknown hidden activation tag {b}"))),
    };
    let output = match r.u8()? {
        0 => OutputActivation::Linear,
        1 => OutputActivation::Tanh,
        b => return Err(SdqlError::Format(format!("unknown output activation tag {b}"))),
    };
    let mut p = MlpParams::zeros(&sizes, hidden, output)?;
    for l in p.layers.iter_mut() {
        l.weights = r.f64s()?;
        l.biases = r.f64s()?;
        if l.weights.len() != l.n_in * l.n_out || l.biases.len() != l.n_out {
            return Err(SdqlError::Format("layer parameter count mismatch".into()));
        }
    }
    if !p.same_shape(expected)
        || p.hidden_activation != expected.hidden_activation
        || p.output_activation != expected.output_activation
    {
        return Err(SdqlError::Format(format!(
            "stored network {:?} does not match the configured {:?}",
            p.layer_sizes, expected.layer_sizes
        )));
    }
    Ok(p)
}

fn write_grads(w: &mut Writer, g: &ParamGrads) {
    for l in &g.layers {
        w.f64s(&l.weights);
        w.f64s(&l.biases);
    }
}

fn read_grads(r: &mut Reader, params: &MlpParams) -> Result<ParamGrads> {
    let mut g = ParamGrads::zeros_like(params);
    for l in g.layers.iter_mut() {
        let (nw, nb) = (l.weights.len(), l.biases.len());
        l.weights = r.f64s()?;
        l.biases = r.f64s()?;
        if l.weights.len() != nw || l.biases.len() != nb {
            return Err(SdqlError::Format("optimizer moment shape mismatch".into()));
        }
    }
    Ok(g)
}

fn write_adam(w: &mut Writer, a: &AdamState) {
    w.u64(a.step_count);
    w.f64(a.beta1);
    w.f64(a.beta2);
    w.f64(a.epsilon);
    write_grads(w, &a.first_moment);
    write_grads(w, &a.second_moment);
}

fn read_adam(r: &mut Reader, params: &MlpParams) -> Result<AdamState> {
    let step_count = r.u64()?;
    let (beta1, beta2, epsilon) = (r.f64()?, r.f64()?, r.f64()?);
    let mut a = AdamState::with_hyper(params, beta1, beta2, epsilon);
    a.step_count = step_count;
    a.first_moment = read_grads(r, params)?;
    a.second_moment = read_grads(r, params)?;
    Ok(a)
}

fn write_space(w: &mut Writer, s: &ActionSpace) {
    match s {
        ActionSpace::Discrete { n } => {
            w.u8(0);
            w.usize(*n);
        }
        ActionSpace::Box { low, high } => {
            w.u8(1);
            w.f64s(low);
            w.f64s(high);
        }
    }
}

fn read_space(r: &mut Reader) -> Result<ActionSpace> {
    match r.u8()? {
        0 => Ok(ActionSpace::Discrete { n: r.usize()? }),
        1 => Ok(ActionSpace::Box {
            low: r.f64s()?,
            high: r.f64s()?,
        }),
        b => Err(SdqlError::Format(format!("unknown action space tag {b}"))),
    }
}

fn module_tag(m: &StageModule) -> u8 {
    match m {
        StageModule::Dqn(_) => 0,
        StageModule::Ddpg(_) => 1,
        StageModule::Td3(_) => 2,
        StageModule::Tabular(_) => 3,
    }
}

fn write_module(w: &mut Writer, m: &StageModule) {
    w.u8(module_tag(m));
    write_space(w, m.action_space());
    match m {
        StageModule::Dqn(d) => {
            write_mlp(w, &d.online);
            write_mlp(w, &d.target);
            write_adam(w, &d.adam);
            w.u64(d.explore_steps);
        }
        StageModule::Ddpg(d) => {
            write_mlp(w, &d.actor);
            write_mlp(w, &d.actor_target);
            write_mlp(w, &d.critic);
            write_mlp(w, &d.critic_target);
            write_adam(w, &d.actor_adam);
            write_adam(w, &d.critic_adam);
        }
        StageModule::Td3(d) => {
            write_mlp(w, &d.actor);
            write_mlp(w, &d.actor_target);
            for c in d.critics.iter().chain(&d.critic_targets) {
                write_mlp(w, c);
            }
            write_adam(w, &d.actor_adam);
            for a in &d.critic_adams {
                write_adam(w, a);
            }
            w.u64(d.learn_calls);
        }
        StageModule::Tabular(t) => {
            w.u64(t.explore_steps);
            w.usize(t.table.len());
            for (k, v) in &t.table {
                w.u64s(k);
                w.f64s(v);
            }
        }
    }
}

fn read_module(r: &mut Reader, config: &ModuleConfig, obs_dim: usize) -> Result<StageModule> {
    let tag = r.u8()?;
    let space = read_space(r)?;
    let mut m = StageModule::build(config, obs_dim, &space, 0)?;
    if module_tag(&m) != tag {
        return Err(SdqlError::Format(format!(
            "stored module tag {tag} does not match configured kind {}",
            config.kind_name()
        )));
    }
    match &mut m {
        StageModule::Dqn(d) => {
            d.online = read_mlp(r, &d.online)?;
            d.target = read_mlp(r, &d.target)?;
            d.adam = read_adam(r, &d.online)?;
            d.explore_steps = r.u64()?;
        }
        StageModule::Ddpg(d) => {
            d.actor = read_mlp(r, &d.actor)?;
            d.actor_target = read_mlp(r, &d.actor_target)?;
            d.critic = read_mlp(r, &d.critic)?;
            d.critic_target = read_mlp(r, &d.critic_target)?;
            d.actor_adam = read_adam(r, &d.actor)?;
            d.critic_adam = read_adam(r, &d.critic)?;
        }
        StageModule::Td3(d) => {
            d.actor = read_mlp(r, &d.actor)?;
            d.actor_target = read_mlp(r, &d.actor_target)?;
            for i in 0..2 {
                d.critics[i] = read_mlp(r, &d.critics[i])?;
            }
            for i in 0..2 {
                d.critic_targets[i] = read_mlp(r, &d.critic_targets[i])?;
            }
            d.actor_adam = read_adam(r, &d.actor)?;
            for i in 0..2 {
                d.critic_adams[i] = read_adam(r, &d.critics[i])?;
            }
            d.learn_calls = r.u64()?;
        }
        StageModule::Tabular(t) => {
            t.explore_steps = r.u64()?;
            let n = r.usize()?;
            let mut table = BTreeMap::new();
            for _ in 0..n {
                let k = r.u64s()?;
                let v = r.f64s()?;
                if v.len() != t.n_actions {
                    return Err(SdqlError::Format("tabular row width mismatch".into()));
                }
                table.insert(k, v);
            }
            t.table = table;
        }
    }
    Ok(m)
}

fn write_action(w: &mut Writer, a: &Action) {
    match a {
        Action::Discrete(i) => {
            w.u8(0);
            w.usize(*i);
        }
        Action::Continuous(v) => {
            w.u8(1);
            w.f64s(v);
        }
    }
}

fn read_action(r: &mut Reader) -> Result<Action> {
    match r.u8()? {
        0 => Ok(Action::Discrete(r.usize()?)),
        1 => Ok(Action::Continuous(r.f64s()?)),
        b => Err(SdqlError::Format(format!("unknown action tag {b}"))),
    }
}

fn write_buffer(w: &mut Writer, b: &ReplayBuffer) {
    w.usize(b.stage());
    w.usize(b.capacity());
    w.usize(b.cursor());
    w.usize(b.len());
    for t in b.items() {
        w.f64s(&t.state_obs);
        write_action(w, &t.action);
        w.f64(t.reward);
        w.f64s(&t.next_state_obs);
        w.bool(t.terminal);
        w.bool(t.stage_transitioned);
        w.usize(t.stage);
    }
}

fn read_buffer(r: &mut Reader) -> Result<ReplayBuffer> {
    let stage = r.usize()?;
    let capacity = r.usize()?;
    let cursor = r.usize()?;
    let n = r.usize()?;
    if n > capacity {
        return Err(SdqlError::Format(format!("buffer holds {n} items over capacity {capacity}")));
    }
    let mut items = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        items.push(Transition {
            state_obs: r.f64s()?,
            action: read_action(r)?,
            reward: r.f64()?,
            next_state_obs: r.f64s()?,
            terminal: r.bool()?,
            stage_transitioned: r.bool()?,
            stage: r.usize()?,
        });
    }
    ReplayBuffer::from_parts(stage, capacity, items, cursor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::with_env;

    const CONFIG: &str = r#"
seed = 11

[environment]
name = "gridworld"
rows = 5
cols = 6
band_thresholds = [3]
goal = [4, 5]

[stages]
n_stages = 2
discounts = [0.9, 0.95]
max_steps = 40

[trainer]
episodes_per_phase = 6
warmup_steps = 20
batch_size = 8
buffer_capacity = 50

[[modules]]
kind = "tabular"

[[modules]]
kind = "dqn"
hidden = [8]
"#;

    #[test]
    fn round_trip_is_byte_identical() {
        let config = RunConfig::parse(CONFIG).unwrap();
        let env = config.validate().unwrap();
        let bytes = with_env!(env, e => {
            let mut t = Trainer::new(e, config.trainer_config()).unwrap();
            for _ in 0..4 {
                t.run_episode().unwrap();
            }
            encode_trainer(&config, &t).unwrap()
        });
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.encode().unwrap(), bytes);
        assert_eq!(ck.progress.episodes_done, 4);
    }

    #[test]
    fn version_and_magic_checked() {
        let config = RunConfig::parse(CONFIG).unwrap();
        let env = config.validate().unwrap();
        let bytes = with_env!(env, e => encode_trainer(&config, &Trainer::new(e, config.trainer_config()).unwrap()).unwrap());
        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(SdqlError::VersionMismatch { found: 7, expected: FORMAT_VERSION })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(SdqlError::Format(_))));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
