//! End-to-end acceptance gate. Runs every check in sequence so wall-clock
//! budgets are measured without competing test threads, prints one
//! `PASS`/`FAIL` line per check, and exits nonzero if any check fails.
//!
//! Pass check names as arguments to run a subset:
//! `cargo test --test acceptance -- end_to_end determinism`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{s, Array1, Array2};
use rand::Rng as _;

use synthvox::audio::Frame;
use synthvox::classifier::{self, Confusion, EarlyStop, EarlyStopping, Init, MetricsReport, TrainOptions};
use synthvox::dataset::{self, ClassWeights, Label, MfccDataset, MfccRow, Provenance};
use synthvox::experiment::{self, report::CellStatus, ExperimentConfig, Generator};
use synthvox::gpt::{self, AttentionProjections, GptConfig, TransformerLm};
use synthvox::lstm::{self, LstmConfig, LstmStack, LstmState};
use synthvox::mfcc::{self, Dct2};
use synthvox::nn::{Activation, Checkpoint, DenseLayer, Mlp, Params};
use synthvox::seed::{self, Rng};
use synthvox::synthetic::GaussianSpeaker;
use synthvox::text::{CharVocab, SYMBOLS};
use synthvox::N_COEFFS;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(elapsed: Duration, limit_secs: u64) -> Outcome {
    ensure!(
        elapsed.as_secs_f64() < limit_secs as f64,
        "took {:.1} s, limit {limit_secs} s",
        elapsed.as_secs_f64()
    );
    Ok(String::new())
}

/// `max |a - b| / max(|a|, |b|)` over all entries.
fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let err = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

// ---------------------------------------------------------------- DSP

fn dft_power_oracle(samples: &[f64], nfft: usize) -> Vec<f64> {
    (0..=nfft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in samples.iter().enumerate() {
                let angle = -2.0 * PI * ((k * n) % nfft) as f64 / nfft as f64;
                re += x * angle.cos();
                im += x * angle.sin();
            }
            (re * re + im * im) / nfft as f64
        })
        .collect()
}

fn dct2_oracle(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(i, v)| v * (PI / n * (i as f64 + 0.5) * k as f64).cos())
                .sum()
        })
        .collect()
}

fn dsp_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(101);
    let (mut worst_ps, mut worst_dct) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let len = rng.random_range(1..=mfcc::DEFAULT_NFFT);
        let samples: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let frame = Frame { samples, start_index: 0 };
        let fast = mfcc::power_spectrum(&frame, mfcc::DEFAULT_NFFT).map_err(|e| e.to_string())?;
        worst_ps = worst_ps.max(rel_inf(&fast.bins, &dft_power_oracle(&frame.samples, mfcc::DEFAULT_NFFT)));

        let n = rng.random_range(1..=64);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        worst_dct = worst_dct.max(rel_inf(&Dct2::new(n).transform(&x), &dct2_oracle(&x)));
    }
    ensure!(worst_ps <= 1e-9, "power spectrum relative error {worst_ps:.2e}");
    ensure!(worst_dct <= 1e-9, "DCT-II relative error {worst_dct:.2e}");
    within(start.elapsed(), 10)?;
    Ok(format!("100 frames, worst relative error: spectrum {worst_ps:.1e}, DCT-II {worst_dct:.1e}"))
}

// ---------------------------------------------------------------- gradients

const FD_EPS: f64 = 1e-6;

/// Central differences of `loss` at the flat parameter indices `coords`.
fn central_differences<P: Params + Clone>(model: &P, coords: &[usize], loss: impl Fn(&P) -> f64) -> Vec<f64> {
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut probe = model.clone();
    coords
        .iter()
        .map(|&flat| {
            let (mut t, mut i) = (0, flat);
            while i >= sizes[t] {
                i -= sizes[t];
                t += 1;
            }
            let orig = probe.params()[t][i];
            probe.params_mut()[t][i] = orig + FD_EPS;
            let up = loss(&probe);
            probe.params_mut()[t][i] = orig - FD_EPS;
            let down = loss(&probe);
            probe.params_mut()[t][i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

/// One index per tensor plus random extras, up to `budget` distinct indices.
fn sample_coords<P: Params>(model: &P, budget: usize, rng: &mut Rng) -> Vec<usize> {
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut picked = std::collections::BTreeSet::new();
    let mut offset = 0;
    for &len in &sizes {
        picked.insert(offset + rng.random_range(0..len));
        offset += len;
    }
    while picked.len() < budget.min(total) {
        picked.insert(rng.random_range(0..total));
    }
    picked.into_iter().collect()
}

fn select(values: &[f64], coords: &[usize]) -> Vec<f64> {
    coords.iter().map(|&i| values[i]).collect()
}

fn mlp_gradients(draws: usize, rng: &mut Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let mut model = classifier::new_classifier(rng.random());
        // nonzero biases keep ReLU inputs off the kink at exactly 0
        for layer in &mut model.layers {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let batch = rng.random_range(2..=8);
        let x = Array2::from_shape_fn((batch, N_COEFFS), |_| rng.random_range(-3.0..3.0));
        let mut y: Vec<f64> = (0..batch).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        y[0] = 1.0;
        y[1] = 0.0;
        let n_pos = y.iter().filter(|&&v| v == 1.0).count();
        let weights = ClassWeights::from_counts(n_pos, batch - n_pos).map_err(|e| e.to_string())?;
        let (_, grads) = model.bce_loss_and_grad(x.view(), &y, &weights).map_err(|e| e.to_string())?;
        let coords: Vec<usize> = (0..model.n_params()).collect();
        let numeric = central_differences(&model, &coords, |m: &Mlp| m.bce_loss(x.view(), &y, &weights).unwrap());
        worst = worst.max(rel_inf(&grads.flat(), &numeric));
    }
    Ok(worst)
}

fn lstm_gradients(draws: usize, rng: &mut Rng) -> f64 {
    let vocab = CharVocab.len();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let hidden = rng.random_range(2..=6);
        let layers = rng.random_range(1..=2);
        let model = LstmStack::new(vocab, hidden, layers, 0.0, rng);
        let (steps, batch) = (rng.random_range(2..=6), rng.random_range(1..=3));
        let inputs: Vec<usize> = (0..steps * batch).map(|_| rng.random_range(0..vocab)).collect();
        let targets: Vec<usize> = (0..steps * batch).map(|_| rng.random_range(0..vocab)).collect();
        let mut state = LstmState::zeros(&model, batch);
        for m in state.h.iter_mut().chain(state.c.iter_mut()) {
            m.mapv_inplace(|_| rng.random_range(-0.8..0.8));
        }
        let (_, grads, _) = model.window_loss_and_grad(&inputs, &targets, batch, &state, None);
        let coords: Vec<usize> = (0..model.n_params()).collect();
        let numeric = central_differences(&model, &coords, |m: &LstmStack| {
            m.window_loss_and_grad(&inputs, &targets, batch, &state, None).0
        });
        worst = worst.max(rel_inf(&grads.flat(), &numeric));
    }
    worst
}

fn transformer_gradients(draws: usize, rng: &mut Rng) -> Result<f64, String> {
    let vocab = CharVocab.len();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let context = rng.random_range(2..=10);
        let model = TransformerLm::new(16, heads, 2, context, rng).map_err(|e| e.to_string())?;
        let len = rng.random_range(1..=context);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let targets: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let (_, grads) = model.loss_and_grad(&tokens, &targets).map_err(|e| e.to_string())?;
        let coords = sample_coords(&model, 160, rng);
        let numeric = central_differences(&model, &coords, |m: &TransformerLm| m.loss_and_grad(&tokens, &targets).unwrap().0);
        worst = worst.max(rel_inf(&select(&grads.flat(), &coords), &numeric));
    }
    Ok(worst)
}

fn gradient_suites() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(202);
    let mlp = mlp_gradients(100, &mut rng)?;
    let lstm = lstm_gradients(100, &mut rng);
    let transformer = transformer_gradients(100, &mut rng)?;
    ensure!(mlp <= 1e-4, "MLP relative error {mlp:.2e}");
    ensure!(lstm <= 1e-4, "LSTM relative error {lstm:.2e}");
    ensure!(transformer <= 1e-3, "transformer relative error {transformer:.2e}");
    within(start.elapsed(), 120)?;
    Ok(format!(
        "100 draws each, worst relative error: MLP {mlp:.1e}, LSTM {lstm:.1e}, 2-layer transformer {transformer:.1e}"
    ))
}

// ---------------------------------------------------------------- attention

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

fn bits(a: &Array2<f64>) -> Vec<u64> {
    a.iter().map(|v| v.to_bits()).collect()
}

fn attention_contracts() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(303);
    let mut worst_sum = 0.0f64;
    let mut worst_h1 = 0.0f64;
    for draw in 0..100 {
        let t = rng.random_range(1..=12);
        let dk = rng.random_range(1..=8);
        let dv = rng.random_range(1..=8);
        let (q, k, v) = (random_matrix(t, dk, &mut rng), random_matrix(t, dk, &mut rng), random_matrix(t, dv, &mut rng));
        for causal in [false, true] {
            let (_, p) = gpt::attention_with_weights(q.view(), k.view(), v.view(), causal).map_err(|e| e.to_string())?;
            for (i, row) in p.rows().into_iter().enumerate() {
                worst_sum = worst_sum.max((row.sum() - 1.0).abs());
                if causal {
                    ensure!(row.iter().skip(i + 1).all(|&w| w == 0.0), "draw {draw}: causal row {i} attends forward");
                }
            }
        }

        let cut = rng.random_range(0..t);
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for m in [&mut q2, &mut k2, &mut v2] {
            let cols = m.ncols();
            m.slice_mut(s![cut + 1.., ..]).assign(&random_matrix(t - cut - 1, cols, &mut rng));
        }
        let a = gpt::scaled_dot_attention(q.view(), k.view(), v.view(), true).map_err(|e| e.to_string())?;
        let b = gpt::scaled_dot_attention(q2.view(), k2.view(), v2.view(), true).map_err(|e| e.to_string())?;
        ensure!(
            bits(&a.slice(s![..=cut, ..]).to_owned()) == bits(&b.slice(s![..=cut, ..]).to_owned()),
            "draw {draw}: attention rows up to {cut} changed with the future"
        );

        let context = rng.random_range(2..=12);
        let lm = TransformerLm::new(16, [1, 2, 4][draw % 3], 2, context, &mut rng).map_err(|e| e.to_string())?;
        let len = rng.random_range(1..=context);
        let cut = rng.random_range(0..len);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..SYMBOLS.len())).collect();
        let mut altered = tokens.clone();
        for tok in altered.iter_mut().skip(cut + 1) {
            *tok = (*tok + 1 + rng.random_range(0..SYMBOLS.len() - 1)) % SYMBOLS.len();
        }
        let la = lm.forward(&tokens).map_err(|e| e.to_string())?;
        let lb = lm.forward(&altered).map_err(|e| e.to_string())?;
        ensure!(
            bits(&la.slice(s![..=cut, ..]).to_owned()) == bits(&lb.slice(s![..=cut, ..]).to_owned()),
            "draw {draw}: model logits up to {cut} changed with the future"
        );

        let d = rng.random_range(1..=12);
        let proj = AttentionProjections::new(d, 1, &mut rng).map_err(|e| e.to_string())?;
        let x = random_matrix(t, d, &mut rng);
        for causal in [false, true] {
            let multi = gpt::multi_head(x.view(), &proj, causal).map_err(|e| e.to_string())?;
            let single = gpt::scaled_dot_attention(
                x.dot(&proj.w_q[0]).view(),
                x.dot(&proj.w_k[0]).view(),
                x.dot(&proj.w_v[0]).view(),
                causal,
            )
            .map_err(|e| e.to_string())?
            .dot(&proj.w_o);
            let diff = (&multi - &single).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            worst_h1 = worst_h1.max(diff);
        }
    }
    ensure!(worst_sum <= 1e-9, "softmax row sum off by {worst_sum:.2e}");
    ensure!(worst_h1 <= 1e-12, "h=1 multi-head differs by {worst_h1:.2e}");
    within(start.elapsed(), 10)?;
    Ok(format!(
        "100 draws: row-sum error {worst_sum:.1e}, causal prefixes bitwise stable, h=1 difference {worst_h1:.1e}"
    ))
}

// ---------------------------------------------------------------- generators

fn grammar_fixture() -> String {
    GaussianSpeaker::random(2, 9.0, 2e-5, 7)
        .sample(200, Label::Speaker, 8)
        .to_text()
        .expect("finite rows")
}

fn fixture_lstm_config() -> LstmConfig {
    LstmConfig {
        units: 64,
        layers: 2,
        epochs: 40,
        seq_len: 64,
        lr: 5e-3,
        min_lr: 1e-4,
        batch_size: 4,
        dropout: 0.0,
        clip_norm: 5.0,
    }
}

fn fixture_gpt_config() -> GptConfig {
    GptConfig {
        d_model: 64,
        heads: 4,
        layers: 2,
        context: 256,
        epochs: 40,
        lr: 3e-3,
        min_lr: 1e-4,
        batch_size: 4,
        clip_norm: 1.0,
    }
}

/// Final-epoch loss, then 500 rows through a checkpoint round trip as the CLI does.
fn grammar_check(name: &str, train: impl FnOnce(&str) -> Result<(Generator, Vec<f64>), String>) -> Result<String, String> {
    let start = Instant::now();
    let corpus = grammar_fixture();
    ensure!(corpus.lines().count() == 200, "fixture has {} lines", corpus.lines().count());
    let (generator, history) = train(&corpus)?;
    let final_loss = *history.last().ok_or("empty loss history")?;
    let restored = Generator::from_checkpoint(&Checkpoint::from_bytes(&generator.to_checkpoint().to_bytes()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let (rows, stats) = experiment::generate_rows(&restored, 500, 1.0, 99).map_err(|e| e.to_string())?;
    ensure!(rows.len() == 500, "{name}: generated {} rows", rows.len());
    ensure!(final_loss <= 0.9, "{name}: final loss {final_loss:.4} nats/char");
    let rate = stats.rejection_rate();
    ensure!(rate <= 0.2, "{name}: rejection rate {rate:.3}");
    within(start.elapsed(), 600)?;
    Ok(format!(
        "{name}: final loss {final_loss:.3} nats/char, rejection {:.1}% over {} lines, {:.0} s",
        100.0 * rate,
        stats.accepted_lines + stats.rejected_lines,
        start.elapsed().as_secs_f64()
    ))
}

fn generator_grammar() -> Outcome {
    let lstm = grammar_check("LSTM", |c| {
        let t = lstm::train_char_lstm(c, &fixture_lstm_config(), 1).map_err(|e| e.to_string())?;
        Ok((Generator::Lstm(t.model), t.history))
    })?;
    let gpt = grammar_check("GPT", |c| {
        let t = gpt::train_transformer(c, &fixture_gpt_config(), 1).map_err(|e| e.to_string())?;
        Ok((Generator::Gpt(t.model), t.history))
    })?;
    Ok(format!("{lstm}; {gpt}"))
}

fn entropy_floor() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(505);
    let corpus: String = (0..50_000).map(|_| SYMBOLS[rng.random_range(0..SYMBOLS.len())]).collect();
    let floor = (SYMBOLS.len() as f64).ln() - 0.1;
    let lstm_cfg = LstmConfig {
        epochs: 10,
        ..fixture_lstm_config()
    };
    let gpt_cfg = GptConfig {
        epochs: 10,
        ..fixture_gpt_config()
    };
    let lstm_min = lstm::train_char_lstm(&corpus, &lstm_cfg, 2)
        .map_err(|e| e.to_string())?
        .history
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let gpt_min = gpt::train_transformer(&corpus, &gpt_cfg, 2)
        .map_err(|e| e.to_string())?
        .history
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    ensure!(lstm_min >= floor, "LSTM loss {lstm_min:.4} below {floor:.4}");
    ensure!(gpt_min >= floor, "GPT loss {gpt_min:.4} below {floor:.4}");
    within(start.elapsed(), 300)?;
    Ok(format!(
        "lowest epoch loss LSTM {lstm_min:.4}, GPT {gpt_min:.4}, floor {floor:.4} nats/char"
    ))
}

// ---------------------------------------------------------------- transfer protocol

fn transfer_protocol() -> Outcome {
    let speaker = GaussianSpeaker::random(2, 2.0, 1.5, 61);
    let mut real = speaker.sample(150, Label::Speaker, 62);
    real.extend(&speaker.shifted(0.4).sample(450, Label::Other, 63));
    let opts = TrainOptions {
        patience: 5,
        shuffle_seed: 64,
        ..Default::default()
    };
    let synth = speaker.sample(200, Label::Speaker, 65);
    let negatives = GaussianSpeaker::random(2, 9.0, 1.0, 66).sample(400, Label::Other, 67);
    let pretrained = classifier::pretrain_on_synthetic(&synth, &negatives, 68, 69, &opts).map_err(|e| e.to_string())?;
    let split_seed = 70;
    let baseline = classifier::finetune(&Init::Fresh(71), &real, split_seed, 0.3, &opts).map_err(|e| e.to_string())?;
    let transfer =
        classifier::finetune(&Init::Checkpoint(pretrained.clone()), &real, split_seed, 0.3, &opts).map_err(|e| e.to_string())?;
    ensure!(
        baseline.record.fingerprint == transfer.record.fingerprint,
        "fingerprints differ: {} vs {}",
        baseline.record.fingerprint,
        transfer.record.fingerprint
    );
    let fresh = Init::Fresh(71).build().map_err(|e| e.to_string())?;
    let loaded = Init::Checkpoint(pretrained).build().map_err(|e| e.to_string())?;
    ensure!(fresh.flat() != loaded.flat(), "transfer did not change the initial weights");

    let trace: Vec<f64> = (1..=30)
        .map(|e| 1.0 / e as f64)
        .chain((0..100).map(|i| 1.0 / 30.0 + 1e-3 * (i % 7) as f64))
        .collect();
    let mut stopper = EarlyStopping::new(25).map_err(|e| e.to_string())?;
    let stop = trace
        .iter()
        .enumerate()
        .find_map(|(i, &l)| (stopper.observe(i + 1, l) == EarlyStop::Stop).then_some(i + 1))
        .ok_or("never stopped")?;
    ensure!(stop == 55 && stopper.best_epoch == 30, "stopped at {stop}, best {}", stopper.best_epoch);

    let mut worst = 0.0f64;
    let mut restored_runs = 0;
    for outcome in [&baseline, &transfer] {
        let (train, val) = dataset::split(&real, 0.3, split_seed).map_err(|e| e.to_string())?;
        let weights = dataset::compute_class_weights(&train).map_err(|e| e.to_string())?;
        let loss = outcome
            .model
            .bce_loss(val.features().view(), &val.targets(), &weights)
            .map_err(|e| e.to_string())?;
        worst = worst.max((loss - outcome.record.best_val_loss).abs());
        if outcome.record.best_epoch < outcome.record.epochs.len() {
            restored_runs += 1;
        }
    }
    ensure!(worst <= 1e-12, "restored val loss differs by {worst:.2e}");
    ensure!(restored_runs == 2, "a run ended on its best epoch; restoration not exercised");
    Ok(format!(
        "fingerprints equal, scripted trace stops at epoch {stop} (best 30), restored val loss within {worst:.1e} \
         (best epochs {}/{} and {}/{})",
        baseline.record.best_epoch,
        baseline.record.epochs.len(),
        transfer.record.best_epoch,
        transfer.record.epochs.len()
    ))
}

// ---------------------------------------------------------------- experiment runs

struct Fixture {
    _tmp: tempfile::TempDir,
    config: PathBuf,
}

fn write_dataset(path: &Path, ds: &MfccDataset) {
    ds.write_csv(path).expect("fixture written");
}

/// Positive speakers (id, seed) with within-cluster spread `sigma` and a pool
/// of other speakers, written as CSV next to a matrix config.
fn experiment_fixture(
    subjects: &[(&str, u64)],
    sigma: f64,
    positives: usize,
    negative_speakers: u64,
    per_negative: usize,
    body: &str,
) -> Fixture {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = tmp.path();
    let mut config = body.to_string();
    for &(name, seed) in subjects {
        let speaker = GaussianSpeaker::random(2, 9.0, sigma, seed);
        write_dataset(&dir.join(format!("{name}.csv")), &speaker.sample(positives, Label::Speaker, seed + 100));
        config.push_str(&format!("\n[[subjects]]\nid = \"{name}\"\npositive = [\"{name}.csv\"]\n"));
    }
    let mut pool = MfccDataset::new();
    for s in 0..negative_speakers {
        let other = GaussianSpeaker::random(3, 9.0, 0.5, 1000 + s);
        pool.extend(&other.sample(per_negative, Label::Other, 2000 + s));
    }
    write_dataset(&dir.join("negatives.csv"), &pool);
    let path = dir.join("matrix.toml");
    fs::write(&path, config).expect("config written");
    Fixture { _tmp: tmp, config: path }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, String> {
    ExperimentConfig::from_toml(&fs::read_to_string(path).map_err(|e| e.to_string())?, path.parent().unwrap(), |_| None)
        .map_err(|e| e.to_string())
}

const END_TO_END_CONFIG: &str = r#"schema_version = 1
master_seed = 2024
output_dir = "runs"
negative = ["negatives.csv"]
negative_rows = 10000
sizes = [0, 2500]
generators = ["lstm", "gpt"]
reps = 3
corpus_rows = 200
baselines = []
workers = 1

[lstm]
units = 64
layers = 2
epochs = 30
seq_len = 64
lr = 0.005
min_lr = 0.0001
batch_size = 4
dropout = 0.0
clip_norm = 5.0

[gpt]
d_model = 64
heads = 4
layers = 2
context = 128
epochs = 30
lr = 0.003
min_lr = 0.0001
batch_size = 4
clip_norm = 1.0
"#;

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let fixture = experiment_fixture(&[("alice", 11), ("bob", 12)], 0.1, 2000, 6, 2000, END_TO_END_CONFIG);
    let cfg = load_config(&fixture.config)?;
    let outcome = experiment::run_matrix(&cfg).map_err(|e| e.to_string())?;
    let failed: Vec<String> = outcome
        .rows
        .iter()
        .filter(|r| r.status != CellStatus::Ok)
        .map(|r| format!("{} {} {} rep {}: {}", r.subject, r.arm, r.size, r.rep, r.message))
        .collect();
    ensure!(failed.is_empty(), "failed cells: {}", failed.join("; "));
    ensure!(outcome.rows.len() == 2 * (3 + 2 * 3), "expected 18 cells, got {}", outcome.rows.len());

    let md = fs::read_to_string(&outcome.report_md).map_err(|e| e.to_string())?;
    let csv = fs::read_to_string(&outcome.report_csv).map_err(|e| e.to_string())?;
    ensure!(md.contains("alice") && md.contains("bob"), "markdown report misses a subject");
    let mut baseline_rows: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] == "matrix" && f[4] == "0" {
            baseline_rows.entry(f[1].to_string()).or_default().push(f[5..11].join(","));
        }
    }
    ensure!(baseline_rows.len() == 2, "baseline rows for {} subjects", baseline_rows.len());
    for (subject, rows) in &baseline_rows {
        ensure!(rows.len() == 2, "{subject}: {} size-0 rows", rows.len());
        ensure!(rows[0] == rows[1], "{subject}: size-0 rows differ across generators: {rows:?}");
    }

    let mut acc: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &outcome.rows {
        acc.entry((r.subject.clone(), r.arm.clone()))
            .or_default()
            .push(r.scores.as_ref().map_or(f64::NAN, |s| s.accuracy));
    }
    let mut summary = Vec::new();
    let mut directional = (0, 0);
    for subject in ["alice", "bob"] {
        let base = acc.get(&(subject.into(), "baseline".into())).ok_or("missing baseline")?;
        let base_mean = mean(base);
        ensure!(base.iter().all(|&a| a >= 95.0), "{subject}: baseline accuracies {base:?} below 95%");
        let mut line = format!("{subject} baseline {base_mean:.2}%");
        for arm in ["lstm", "gpt"] {
            let accs = acc.get(&(subject.into(), arm.into())).ok_or("missing transfer arm")?;
            let m = mean(accs);
            ensure!(m >= base_mean - 2.0, "{subject} {arm}: transfer {m:.2}% vs baseline {base_mean:.2}%");
            for (a, b) in accs.iter().zip(base) {
                directional.1 += 1;
                if a >= b {
                    directional.0 += 1;
                }
            }
            line.push_str(&format!(", {arm} {m:.2}%"));
        }
        summary.push(line);
    }
    within(start.elapsed(), 1800)?;
    Ok(format!(
        "18 cells ok, reports rendered; {}; transfer >= baseline in {}/{} paired runs; {:.0} s",
        summary.join("; "),
        directional.0,
        directional.1,
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- metrics

fn metrics_arithmetic() -> Outcome {
    let mut rows = MfccDataset::new();
    let mut push = |n: usize, sign: f64, label: Label| {
        for _ in 0..n {
            let mut c = [0.0; N_COEFFS];
            c[0] = sign;
            rows.push(MfccRow::new(c, label), Provenance::RealPositive);
        }
    };
    push(8, 1.0, Label::Speaker);
    push(2, -1.0, Label::Speaker);
    push(1, 1.0, Label::Other);
    push(89, -1.0, Label::Other);
    let mut w = Array2::zeros((1, N_COEFFS));
    w[[0, 0]] = 10.0;
    let model = Mlp::from_layers(vec![DenseLayer {
        weights: w,
        bias: Array1::zeros(1),
        activation: Activation::Sigmoid,
    }]);
    let m = classifier::evaluate(&model, &rows).map_err(|e| e.to_string())?;
    ensure!(
        m.confusion == Confusion { tp: 8, fn_: 2, fp: 1, tn: 89 },
        "confusion {:?}",
        m.confusion
    );
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    ensure!(close(m.positive.precision, 8.0 / 9.0), "precision {}", m.positive.precision);
    ensure!(close(m.positive.recall, 0.8), "recall {}", m.positive.recall);
    ensure!(close(m.accuracy, 97.0), "accuracy {}", m.accuracy);
    let hand = MetricsReport::from_confusion(Confusion { tp: 3, fn_: 1, fp: 2, tn: 4 }).map_err(|e| e.to_string())?;
    ensure!(
        close(hand.positive.precision, 0.6) && close(hand.positive.recall, 0.75) && close(hand.negative.recall, 4.0 / 6.0),
        "second hand example {hand:?}"
    );

    let mut rng = seed::rng(808);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (p, n) = (rng.random_range(1..200_000usize), rng.random_range(1..200_000usize));
        let cw = ClassWeights::from_counts(p, n).map_err(|e| e.to_string())?;
        let (a, b) = (cw.w_pos * p as f64, cw.w_neg * n as f64);
        worst = worst.max((a - b).abs() / a.max(b));
    }
    ensure!(worst <= 1e-12, "weighted class totals differ by {worst:.2e}");
    let cw = ClassWeights::from_counts(2500, 100_000).map_err(|e| e.to_string())?;
    let ratio = cw.w_pos / cw.w_neg;
    ensure!(close(ratio, 40.0), "100000/2500 ratio {ratio}");
    Ok(format!(
        "TP=8 FN=2 FP=1 TN=89 -> precision {:.6}, recall {:.6}; balance error {worst:.1e}; ratio {ratio}:1",
        m.positive.precision, m.positive.recall
    ))
}

// ---------------------------------------------------------------- determinism

const DETERMINISM_CONFIG: &str = r#"schema_version = 1
master_seed = 77
output_dir = "runs"
negative = ["negatives.csv"]
negative_rows = 1000
sizes = [0, 100]
generators = ["lstm", "gpt"]
reps = 2
corpus_rows = 100

[lstm]
units = 64
layers = 1
epochs = 25
seq_len = 64
lr = 0.01
min_lr = 0.0001
batch_size = 4
dropout = 0.1
clip_norm = 5.0

[gpt]
d_model = 64
heads = 4
layers = 2
context = 128
epochs = 30
lr = 0.003
min_lr = 0.0001
batch_size = 4
clip_norm = 1.0

[classifier]
patience = 5
"#;

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable run dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let fixture = experiment_fixture(&[("alice", 11)], 2e-5, 300, 3, 600, DETERMINISM_CONFIG);
    let base = load_config(&fixture.config)?;
    let mut trees = Vec::new();
    let mut failures = Vec::new();
    for (run, workers) in [("first", 1), ("second", 2)] {
        let cfg = ExperimentConfig {
            output_dir: base.output_dir.join(run),
            workers: Some(workers),
            ..base.clone()
        };
        let outcome = experiment::run_matrix(&cfg).map_err(|e| e.to_string())?;
        failures.extend(
            outcome
                .rows
                .iter()
                .filter(|r| r.status != CellStatus::Ok)
                .map(|r| format!("{} {} {} rep {}: {}", r.subject, r.arm, r.size, r.rep, r.message)),
        );
        trees.push(tree(&cfg.output_dir));
    }
    ensure!(failures.is_empty(), "failed cells: {}", failures.join("; "));
    let (a, b) = (&trees[0], &trees[1]);
    ensure!(a.keys().eq(b.keys()), "runs wrote different file sets");
    let differing: Vec<String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure!(differing.is_empty(), "files differ: {}", differing.join(", "));
    let ckpts = a.keys().filter(|k| k.extension().is_some_and(|e| e == "ckpt")).count();
    ensure!(a.contains_key(Path::new("report.md")) && a.contains_key(Path::new("report.csv")), "reports missing");
    Ok(format!("{} files identical across runs with 1 and 2 workers, {ckpts} checkpoints", a.len()))
}

// ---------------------------------------------------------------- serialization

fn serialization() -> Outcome {
    let mut rng = seed::rng(1010);
    let mut ds = MfccDataset::new();
    for _ in 0..500 {
        let scale = [1.0, 10.0, 1000.0][rng.random_range(0..3)];
        let c: [f64; N_COEFFS] = std::array::from_fn(|_| rng.random_range(-scale..scale));
        let label = if rng.random_bool(0.5) { Label::Speaker } else { Label::Other };
        ds.push(MfccRow::new(c, label), Provenance::RealPositive);
    }
    let (parsed, rejected) = dataset::parse_and_filter(&ds.to_text().map_err(|e| e.to_string())?);
    ensure!(rejected == 0 && parsed.len() == ds.len(), "round trip lost rows");
    let mut worst = 0.0f64;
    for (a, b) in ds.rows().iter().zip(&parsed) {
        ensure!(a.label == b.label, "label changed");
        for (x, y) in a.coefficients.0.iter().zip(b.coefficients.0.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure!(worst <= 5e-6, "value drift {worst:.2e}");

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let lstm_model = LstmStack::new(CharVocab.len(), 16, 2, 0.2, &mut rng);
    let gpt_model = TransformerLm::new(16, 4, 2, 32, &mut rng).map_err(|e| e.to_string())?;
    let checkpoints = [
        ("mlp", classifier::new_classifier(5).to_checkpoint()),
        ("lstm", lstm_model.to_checkpoint()),
        ("gpt", gpt_model.to_checkpoint()),
    ];
    for (name, ckpt) in &checkpoints {
        let path = tmp.path().join(format!("{name}.ckpt"));
        ckpt.save(&path).map_err(|e| e.to_string())?;
        let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        let rebuilt = match *name {
            "mlp" => Mlp::from_checkpoint(&loaded).map_err(|e| e.to_string())?.to_checkpoint(),
            "lstm" => LstmStack::from_checkpoint(&loaded).map_err(|e| e.to_string())?.to_checkpoint(),
            _ => TransformerLm::from_checkpoint(&loaded).map_err(|e| e.to_string())?.to_checkpoint(),
        };
        ensure!(rebuilt.to_bytes() == ckpt.to_bytes(), "{name} checkpoint changed on round trip");
    }
    let lstm_back = LstmStack::from_checkpoint(&checkpoints[1].1).map_err(|e| e.to_string())?;
    ensure!(
        lstm_back.flat().iter().map(|v| v.to_bits()).eq(lstm_model.flat().iter().map(|v| v.to_bits())),
        "LSTM weights not bit-exact"
    );

    let fixture = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/parse_cases.csv"))
        .map_err(|e| e.to_string())?;
    // 1-based line numbers of well-formed cases
    let valid = [1, 2, 3, 10, 15, 20];
    let lines: Vec<&str> = fixture.strip_suffix('\n').unwrap_or(&fixture).split('\n').collect();
    ensure!(lines.len() == 20, "fixture has {} cases", lines.len());
    for (i, line) in lines.iter().enumerate() {
        let ok = dataset::parse_line(line).is_some();
        ensure!(ok == valid.contains(&(i + 1)), "case {} misclassified: {line:?}", i + 1);
    }
    let (rows, rejected) = dataset::parse_and_filter(&fixture);
    ensure!(rows.len() == valid.len() && rejected == 20 - valid.len(), "kept {}, rejected {rejected}", rows.len());
    let expected: Vec<MfccRow> = valid.iter().map(|&i| dataset::parse_line(lines[i - 1]).unwrap()).collect();
    ensure!(rows == expected, "kept rows differ from the well-formed cases");
    Ok(format!(
        "500 rows within {worst:.1e}, labels exact; MLP/LSTM/GPT checkpoints bit-exact; fixture kept {} rejected {rejected}",
        rows.len()
    ))
}

// ---------------------------------------------------------------- driver

const CHECKS: [(&str, fn() -> Outcome); 10] = [
    ("dsp_oracles", dsp_oracles),
    ("gradient_suites", gradient_suites),
    ("attention_contracts", attention_contracts),
    ("generator_grammar", generator_grammar),
    ("entropy_floor", entropy_floor),
    ("transfer_protocol", transfer_protocol),
    ("end_to_end", end_to_end),
    ("metrics_arithmetic", metrics_arithmetic),
    ("determinism", determinism),
    ("serialization", serialization),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in CHECKS {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
