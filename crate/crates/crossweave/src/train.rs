//! Solo and collaborative training loops.
//!
//! Every domain runs the same loop: shuffle, batch, forward (with hooks
//! standardizing activations), loss, backward, SGD. Collaborative runs
//! splice the secure weave unit into each hook; the joint objective is the
//! sum of per-domain losses, each optimized locally. A failed MAC check
//! anywhere tears the whole run down and discards partial models.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cnn::{
    backward_with, forward_with, sgd_step, softmax_cross_entropy, BatchTensor, ModelParams,
    NetworkSpec, Phase, TrainConfig,
};
use crate::data::Dataset;
use crate::dealer::{read_party_file, PreprocSource, StreamingDealer};
use crate::protocol::ProtocolParty;
use crate::report::EpochRecord;
use crate::ring::FixedPointCodec;
use crate::sharing::PartyId;
use crate::transfer::{weave_forward_secure, DegreeMatrix, ThetaMode};
use crate::transport::{InProcessTransport, Transport};
use crate::{Error, Result};

/// Per-domain training data plus the held-out evaluation split.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Everything a collaborative run needs beyond the data.
#[derive(Clone, Debug)]
pub struct CollabOptions {
    pub net: NetworkSpec,
    pub theta: DegreeMatrix,
    pub train_cfg: TrainConfig,
    pub theta_mode: ThetaMode,
    pub precision: u32,
    /// Local epochs each domain trains before the transfer units engage
    /// (the pre-training step of the protocol).
    pub warmup_epochs: usize,
    /// Mix hook gradients through the unit on the way back as well.
    pub mix_gradients: bool,
    /// Report wall times as zero so equal-seed runs are byte-identical.
    pub fixed_clock: bool,
    pub timeout: Duration,
}

impl CollabOptions {
    pub fn new(net: NetworkSpec, theta: DegreeMatrix, train_cfg: TrainConfig) -> CollabOptions {
        CollabOptions {
            net,
            theta,
            train_cfg,
            theta_mode: ThetaMode::Public,
            precision: 8,
            warmup_epochs: 0,
            mix_gradients: true,
            fixed_clock: false,
            timeout: Duration::from_secs(30),
        }
    }
}

/// Where the offline material comes from.
#[derive(Clone, Debug)]
pub enum PreprocPlan {
    /// Deal in memory at run start, streaming material chunk by chunk.
    Inline { seed: u64 },
    /// One preprocessing file per party, in party order.
    Files { paths: Vec<PathBuf> },
}

/// Terminal state of a run.
#[derive(Debug)]
pub enum RunOutcome {
    Completed {
        models: Vec<ModelParams>,
        records: Vec<EpochRecord>,
        transcripts: Vec<String>,
    },
    /// ⊥: a verification failed; partial models are discarded.
    Aborted { round: u32, reason: String },
}

impl RunOutcome {
    pub fn is_aborted(&self) -> bool {
        matches!(self, RunOutcome::Aborted { .. })
    }
}

/// Seed for one domain's private randomness (init, shuffle, dropout).
pub fn domain_seed(base: u64, domain: PartyId) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(domain.index() as u64)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Class-stratified epoch order: epoch position p preferentially carries a
/// sample of class `p % classes`, falling back to the largest remaining
/// class pool once one runs dry (exact for class-balanced corpora).
///
/// Alignment across domains is purely positional: every domain applies the
/// same local rule to its own private labels, so corresponding batch slots
/// carry like classes without any label ever leaving a domain. That makes
/// the mixed activations same-class augmentation instead of cross-class
/// noise.
fn stratified_order(
    labels: &[u8],
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (idx, &label) in labels.iter().enumerate() {
        pools[label as usize % classes].push(idx);
    }
    for pool in &mut pools {
        shuffle(pool, rng);
    }
    let mut order = Vec::with_capacity(labels.len());
    for position in 0..labels.len() {
        let wanted = position % classes;
        let pick = if pools[wanted].is_empty() {
            pools
                .iter()
                .enumerate()
                .max_by_key(|(_, p)| p.len())
                .map(|(c, _)| c)
                .unwrap()
        } else {
            wanted
        };
        order.push(pools[pick].pop().unwrap());
    }
    order
}

/// What happens to activations and gradients at a hook.
trait HookMixer {
    fn forward_mix(&mut self, layer: usize, t: BatchTensor) -> Result<BatchTensor>;
    fn backward_mix(&mut self, layer: usize, g: BatchTensor) -> Result<BatchTensor>;
    fn epoch_sync(&mut self) -> Result<()>;
    /// Called as each epoch begins (1-based); lets the mixer wake up after
    /// warm-up. Must be deterministic and identical across domains.
    fn begin_epoch(&mut self, _epoch: usize) {}
}

/// Solo training: hooks standardize (inside the forward pass) and pass
/// through.
struct Passthrough;

impl HookMixer for Passthrough {
    fn forward_mix(&mut self, _layer: usize, t: BatchTensor) -> Result<BatchTensor> {
        Ok(t)
    }

    fn backward_mix(&mut self, _layer: usize, g: BatchTensor) -> Result<BatchTensor> {
        Ok(g)
    }

    fn epoch_sync(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Collaborative hooks: activations go through the secure weave unit on the
/// way forward, and the per-location gradient vector goes through it again
/// on the way back. The backward mix is Θᵀ·(∂L/∂X̃), and Θ is symmetric, so
/// the same unit serves both directions; each domain's features thereby
/// receive gradient from every domain's loss, which is what makes the
/// transferred knowledge trainable.
struct SecureMixer<'a, T: Transport, P: PreprocSource> {
    engine: &'a mut ProtocolParty<T, P>,
    theta: &'a DegreeMatrix,
    mode: ThetaMode,
    /// Transfer units stay dormant during local warm-up epochs.
    active: bool,
    warmup_epochs: usize,
    mix_gradients: bool,
}

/// Hook gradients are orders of magnitude below the fixed-point resolution
/// at p = 8, so they ride through the unit pre-scaled by a public constant
/// and are scaled back after; 2^20 keeps even late-training batch-mean
/// gradients well above quantization noise while staying far inside the
/// representable range.
const GRAD_WIRE_SCALE: f64 = 1_048_576.0;

impl<T: Transport, P: PreprocSource> HookMixer for SecureMixer<'_, T, P> {
    fn forward_mix(&mut self, _layer: usize, t: BatchTensor) -> Result<BatchTensor> {
        if !self.active {
            return Ok(t);
        }
        let batch = t.batch;
        let shape = t.shape;
        let mixed = weave_forward_secure(&t.to_activation(), self.theta, self.mode, self.engine)?;
        Ok(BatchTensor::from_activation(mixed, batch, shape))
    }

    fn backward_mix(&mut self, _layer: usize, mut g: BatchTensor) -> Result<BatchTensor> {
        if !self.active || !self.mix_gradients {
            return Ok(g);
        }
        let batch = g.batch;
        let shape = g.shape;
        for v in &mut g.data {
            *v *= GRAD_WIRE_SCALE;
        }
        let mixed = weave_forward_secure(&g.to_activation(), self.theta, self.mode, self.engine)?;
        let mut out = BatchTensor::from_activation(mixed, batch, shape);
        for v in &mut out.data {
            *v /= GRAD_WIRE_SCALE;
        }
        Ok(out)
    }

    fn epoch_sync(&mut self) -> Result<()> {
        self.engine.round_barrier()
    }

    fn begin_epoch(&mut self, epoch: usize) {
        self.active = epoch > self.warmup_epochs;
    }
}

/// One domain's full training result.
pub struct TrainResult {
    pub params: ModelParams,
    pub records: Vec<EpochRecord>,
    /// Per-epoch list of per-batch losses (for convergence checks).
    pub batch_losses: Vec<Vec<f64>>,
}

/// Accuracy of the deployed (possibly coupled) network: test batches run
/// through the same hooks as training, so a collaborative domain measures
/// its classifier on mixed features of the shared held-out split. All
/// domains evaluate in lockstep over identical batch boundaries.
fn evaluate_with_mixer<M: HookMixer>(
    net: &NetworkSpec,
    params: &ModelParams,
    test: &Dataset,
    mixer: &mut M,
) -> Result<f64> {
    if test.is_empty() {
        return Err(crate::Error::EmptyTestSet);
    }
    let classes = net.num_classes();
    let per_sample: usize = net.input.iter().product();
    let mut correct = 0usize;
    let mut start = 0;
    while start < test.images.len() {
        let end = (start + 256).min(test.images.len());
        let imgs = &test.images[start..end];
        let mut batch = BatchTensor::zeros(imgs.len(), net.input);
        for (bi, img) in imgs.iter().enumerate() {
            batch.data[bi * per_sample..(bi + 1) * per_sample].copy_from_slice(img);
        }
        let cache = forward_with(net, params, &batch, &mut Phase::Eval, |l, t| {
            mixer.forward_mix(l, t)
        })?;
        for (bi, &label) in test.labels[start..end].iter().enumerate() {
            let row = &cache.logits.data[bi * classes..(bi + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(k, _)| k)
                .unwrap();
            if pred == label as usize {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / test.images.len() as f64)
}

fn run_domain_loop<M: HookMixer>(
    net: &NetworkSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    domain: PartyId,
    fixed_clock: bool,
    mixer: &mut M,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config(format!("domain {domain} has no training data")));
    }
    let per_sample: usize = net.input.iter().product();
    let mut params = ModelParams::init(net, domain_seed(cfg.seed, domain) ^ 0x1317_c0de)?;
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(cfg.seed, domain));
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::with_capacity(cfg.epochs);

    let classes = net.num_classes().max(1);
    for epoch in 1..=cfg.epochs {
        mixer.begin_epoch(epoch);
        let started = Instant::now();
        let order = stratified_order(&train.labels, classes, &mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = BatchTensor::zeros(chunk.len(), net.input);
            let mut labels = Vec::with_capacity(chunk.len());
            for (bi, &idx) in chunk.iter().enumerate() {
                batch.data[bi * per_sample..(bi + 1) * per_sample]
                    .copy_from_slice(&train.images[idx]);
                labels.push(train.labels[idx]);
            }
            let mut phase = Phase::Train {
                dropout_keep: cfg.dropout_keep,
                rng: &mut rng,
            };
            let cache = forward_with(net, &params, &batch, &mut phase, |l, t| {
                mixer.forward_mix(l, t)
            })?;
            let (loss, dlogits) = softmax_cross_entropy(&cache.logits, &labels);
            losses.push(loss);
            let back = backward_with(net, &params, &cache, dlogits, |l, g| {
                mixer.backward_mix(l, g)
            })?;
            sgd_step(
                &mut params,
                &mut velocity,
                &back.grads,
                cfg.learning_rate,
                cfg.momentum,
            );
            if !params.is_finite() {
                return Err(Error::Config(format!(
                    "domain {domain}: parameters went non-finite in epoch {epoch}"
                )));
            }
        }
        mixer.epoch_sync()?;
        let accuracy = evaluate_with_mixer(net, &params, test, mixer)?;
        records.push(EpochRecord {
            epoch,
            domain: domain.index(),
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            test_accuracy: accuracy,
            wall_time_s: if fixed_clock {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            },
        });
        batch_losses.push(losses);
    }
    Ok(TrainResult {
        params,
        records,
        batch_losses,
    })
}

/// Train one domain alone.
pub fn train_solo(
    net: &NetworkSpec,
    data: &DomainData,
    cfg: &TrainConfig,
    domain: PartyId,
    fixed_clock: bool,
) -> Result<TrainResult> {
    run_domain_loop(net, &data.train, &data.test, cfg, domain, fixed_clock, &mut Passthrough)
}

/// Run one domain's side of a collaborative session over an arbitrary
/// transport; this is what each in-process thread runs and what a TCP-mode
/// process runs directly.
pub fn train_domain<T: Transport, P: PreprocSource>(
    transport: T,
    preproc: P,
    data: &DomainData,
    opts: &CollabOptions,
) -> Result<(TrainResult, String)> {
    let codec = FixedPointCodec::new(opts.precision)?;
    let domain = transport.me();
    let mut engine = ProtocolParty::new(transport, preproc, codec);
    engine.round_barrier()?;
    let mut mixer = SecureMixer {
        engine: &mut engine,
        theta: &opts.theta,
        mode: opts.theta_mode,
        active: opts.warmup_epochs == 0,
        warmup_epochs: opts.warmup_epochs,
        mix_gradients: opts.mix_gradients,
    };
    let result = run_domain_loop(
        &opts.net,
        &data.train,
        &data.test,
        &opts.train_cfg,
        domain,
        opts.fixed_clock,
        &mut mixer,
    )?;
    Ok((result, engine.transcript().to_lines()))
}

/// Collaborative training over caller-provided transports and preprocessing
/// sources (the adversary harness passes tampering transports here).
pub fn train_collaborative_with<T: Transport + 'static>(
    transports: Vec<T>,
    preprocs: Vec<Box<dyn PreprocSource>>,
    domains: Vec<DomainData>,
    opts: &CollabOptions,
) -> Result<RunOutcome> {
    let n = domains.len();
    assert_eq!(transports.len(), n);
    assert_eq!(preprocs.len(), n);
    let lens: Vec<usize> = domains.iter().map(|d| d.train.len()).collect();
    if lens.iter().any(|&l| l != lens[0]) {
        return Err(Error::Config(format!(
            "domains must hold equally many samples for batch alignment, got {lens:?}"
        )));
    }

    let mut handles = Vec::with_capacity(n);
    for ((transport, preproc), data) in transports.into_iter().zip(preprocs).zip(domains) {
        let opts = opts.clone();
        handles.push(std::thread::spawn(move || -> Result<(TrainResult, String)> {
            train_domain(transport, preproc, &data, &opts)
        }));
    }

    let mut models = Vec::with_capacity(n);
    let mut records = Vec::new();
    let mut transcripts = Vec::with_capacity(n);
    let mut abort: Option<(u32, String)> = None;
    let mut other_error: Option<Error> = None;
    for handle in handles {
        match handle.join().expect("domain thread panicked") {
            Ok((result, transcript)) => {
                models.push(result.params);
                records.extend(result.records);
                transcripts.push(transcript);
            }
            Err(e) if e.is_abort() => {
                let round = match e {
                    Error::MacCheckFailed { round } | Error::RemoteAbort { round, .. } => round,
                    _ => unreachable!(),
                };
                abort.get_or_insert((round, e.to_string()));
            }
            Err(e) => {
                other_error.get_or_insert(e);
            }
        }
    }
    if let Some((round, reason)) = abort {
        return Ok(RunOutcome::Aborted { round, reason });
    }
    if let Some(e) = other_error {
        return Err(e);
    }
    records.sort_by_key(|r| (r.epoch, r.domain));
    Ok(RunOutcome::Completed {
        models,
        records,
        transcripts,
    })
}

/// Collaborative training over the in-process deterministic network.
pub fn train_collaborative(
    domains: Vec<DomainData>,
    opts: &CollabOptions,
    preproc: PreprocPlan,
) -> Result<RunOutcome> {
    let n = domains.len();
    if n == 0 {
        return Err(Error::Config("no domains".into()));
    }
    if opts.theta.n() != n {
        return Err(Error::Config(format!(
            "degree matrix is for n = {}, run has n = {n}",
            opts.theta.n()
        )));
    }
    if n == 1 {
        // Degenerate single-domain run: no hooks active, identical to solo.
        let result = train_solo(
            &opts.net,
            &domains[0],
            &opts.train_cfg,
            PartyId::new(1),
            opts.fixed_clock,
        )?;
        return Ok(RunOutcome::Completed {
            models: vec![result.params],
            records: result.records,
            transcripts: vec![String::new()],
        });
    }
    let transports = InProcessTransport::create(n, opts.timeout);
    let preprocs: Vec<Box<dyn PreprocSource>> = match preproc {
        PreprocPlan::Inline { seed } => {
            let dealer = StreamingDealer::new(n, seed);
            PartyId::all(n)
                .map(|p| Box::new(dealer.handle(p)) as Box<dyn PreprocSource>)
                .collect()
        }
        PreprocPlan::Files { paths } => {
            if paths.len() != n {
                return Err(Error::Config(format!(
                    "{} preprocessing files for {n} parties",
                    paths.len()
                )));
            }
            let mut sources: Vec<Box<dyn PreprocSource>> = Vec::with_capacity(n);
            for (i, path) in paths.iter().enumerate() {
                let pp = read_party_file(path)?;
                if pp.party != PartyId::from_slot(i) || pp.n as usize != n {
                    return Err(Error::BadPreprocessingFile(format!(
                        "{}: wrong party/size (file is {} of {}, expected {} of {n})",
                        path.display(),
                        pp.party,
                        pp.n,
                        PartyId::from_slot(i),
                    )));
                }
                sources.push(Box::new(pp));
            }
            sources
        }
    };
    train_collaborative_with(transports, preprocs, domains, opts)
}
