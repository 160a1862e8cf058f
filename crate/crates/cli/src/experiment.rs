//! Scenario files and the trial runner behind `markbench experiment`.
//!
//! Every trial draws from its own ChaCha20 stream of the master seed, so the
//! report does not depend on `--jobs`.

use std::collections::BTreeSet;
use std::ops::Range;

use markbench::analysis::k_star;
use markbench::attacks::{apply_channel, block_splice, BlockRef, Channel};
use markbench::fpcode::FpParams;
use markbench::lbit::{self, erasure_ball_contains, keygen_l, EncodeOptions, Message, PartialMessage, Symbol};
use markbench::multiuser::{mu_keygen, mu_trace_report, mu_wat_with};
use markbench::tokens::{ModelConfig, Prompt, TokenSeq, ToyModel};
use markbench::zerobit::{detect0, generate, keygen0, GenLimits};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::failure::{Failure, Outcome};
use crate::keys::{Key, Level};

pub const SCHEMA_VERSION: u32 = 1;

const DEFAULT_TEXT_LEN: usize = 2000;
const DEFAULT_LENGTH_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// Key-independent random text against fresh keys.
    Soundness,
    /// One honest generation, optionally edited, then detected or decoded.
    Completeness,
    /// `c` users pool their generations and splice blocks together.
    Collusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub level: Level,
    pub lambda: u32,
    /// Message length for `lbit`; code length override for `multi`.
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
    #[serde(default)]
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_scale: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum Adversary {
    /// Output the generation unchanged.
    #[default]
    Identity,
    /// Keep `keep` blocks drawn from all generations, shuffled, optionally
    /// separated by unmarked filler as long as the input.
    BlockSplice {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        keep: Option<usize>,
        #[serde(default)]
        filler: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: Kind,
    pub scheme: SchemeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub adversary: Adversary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<Channel>,
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Soundness: random texts have length uniform in `0..=text_len`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_len: Option<usize>,
    /// Blocks each generating user produces per trial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
}

/// One trial's outcome. Fields that do not apply to the scenario are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub trial: usize,
    pub text_len: usize,
    pub detected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub erasures: Option<usize>,
    /// Non-erased symbols that match the embedded word.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits_recovered: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits_wrong: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_ball: Option<bool>,
    /// Users whose output went into the text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guilty: Option<BTreeSet<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accused: Option<BTreeSet<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub trials: usize,
    pub detection_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_erasures: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_bits_recovered: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_ball_rate: Option<f64>,
    /// Accused users who are guilty, over all accusations. Absent when
    /// nobody was accused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_precision: Option<f64>,
    /// Guilty users accused, over all guilty users.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_recall: Option<f64>,
    /// Trials whose accused set is a nonempty subset of the guilty set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_success_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub false_accusations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_ms: f64,
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    /// The scenario with every default filled in.
    pub scenario: Scenario,
    pub seed: u64,
    pub records: Vec<Record>,
    pub aggregates: Aggregates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

/// A scenario with defaults resolved and parameters checked.
struct Plan {
    scenario: Scenario,
    seed: u64,
    model: ToyModel,
    fp: Option<FpParams>,
    blocks: usize,
    keep: Option<usize>,
}

impl Plan {
    fn new(mut s: Scenario, seed: u64) -> Outcome<Self> {
        if s.trials == 0 {
            return Err(Failure::invalid("trials must be at least 1"));
        }
        let sc = &mut s.scheme;
        if sc.lambda == 0 {
            return Err(Failure::invalid("lambda must be at least 1"));
        }
        if !(0.0..1.0).contains(&sc.delta) {
            return Err(Failure::invalid(format!("delta must lie in [0, 1), got {}", sc.delta)));
        }
        let fp = match sc.level {
            Level::Zero => None,
            Level::Lbit => {
                if sc.len.is_none_or(|l| l == 0) {
                    return Err(Failure::invalid("lbit scenarios need L >= 1"));
                }
                None
            }
            Level::Multi => {
                let (Some(n), Some(c)) = (sc.n, sc.c) else {
                    return Err(Failure::invalid("multi scenarios need n and c"));
                };
                let scale = *sc.length_scale.get_or_insert(DEFAULT_LENGTH_SCALE);
                let mut p = FpParams::with_scale(sc.lambda, n, c, sc.delta, scale);
                p.z_scale = *sc.z_scale.get_or_insert(p.z_scale);
                if let Some(len) = sc.len {
                    p = p.with_length(len);
                }
                p.validate()?;
                Some(p)
            }
        };
        let code_len = match (sc.level, &fp) {
            (Level::Multi, Some(p)) => Some(p.code_length()),
            _ => sc.len,
        };
        // Blocks needed for robust decoding; a zero-bit mark needs one.
        let k = match code_len {
            Some(l) => k_star(l, sc.delta, sc.lambda)?,
            None => 1,
        };
        let model = match &s.model {
            Some(cfg) => ToyModel::try_from(cfg)?,
            None => ToyModel::uniform(usize::MAX),
        };
        s.model = Some(ModelConfig::from(&model));
        let (blocks, keep) = match s.kind {
            Kind::Soundness => {
                s.text_len.get_or_insert(DEFAULT_TEXT_LEN);
                (0, None)
            }
            Kind::Completeness => (*s.blocks.get_or_insert(k), None),
            Kind::Collusion => {
                let Some(p) = &fp else {
                    return Err(Failure::invalid("collusion scenarios need level multi"));
                };
                // A quarter more than an even share of k*.
                let share = (5 * k).div_ceil(4 * p.c);
                (*s.blocks.get_or_insert(share), None)
            }
        };
        let keep = match &mut s.adversary {
            Adversary::Identity if s.kind == Kind::Collusion => {
                return Err(Failure::invalid("collusion scenarios need a block_splice adversary"));
            }
            Adversary::Identity => keep,
            Adversary::BlockSplice { keep, filler } => {
                if *filler && s.channel.is_some() {
                    return Err(Failure::invalid("a channel cannot follow a block splice with filler"));
                }
                Some(*keep.get_or_insert(k))
            }
        };
        if s.kind == Kind::Soundness && (s.adversary != Adversary::Identity || s.channel.is_some()) {
            return Err(Failure::invalid("soundness scenarios take no adversary or channel"));
        }
        Ok(Plan {
            scenario: s,
            seed,
            model,
            fp,
            blocks,
            keep,
        })
    }

    fn trial_rng(&self, trial: usize) -> ChaCha20Rng {
        let mut r = ChaCha20Rng::seed_from_u64(self.seed);
        r.set_stream(trial as u64);
        r
    }

    fn run(&self, trial: usize) -> Outcome<Record> {
        let mut rng = self.trial_rng(trial);
        match self.scenario.kind {
            Kind::Soundness => self.soundness(trial, &mut rng),
            Kind::Completeness => self.completeness(trial, &mut rng),
            Kind::Collusion => self.collusion(trial, &mut rng),
        }
    }

    fn soundness(&self, trial: usize, rng: &mut ChaCha20Rng) -> Outcome<Record> {
        let sc = &self.scenario.scheme;
        let keys = fresh_key(sc, self.fp.as_ref(), rng)?;
        let max = self.scenario.text_len.unwrap_or(DEFAULT_TEXT_LEN);
        let len = rng.gen_range(0..=max);
        let text = TokenSeq::from_bits((0..len).map(|_| rng.gen::<bool>()));
        keys.judge(trial, &text, None, BTreeSet::new(), sc.delta)
    }

    fn completeness(&self, trial: usize, rng: &mut ChaCha20Rng) -> Outcome<Record> {
        let sc = &self.scenario.scheme;
        let keys = fresh_key(sc, self.fp.as_ref(), rng)?;
        let q = Prompt::empty();
        let (text, ranges, word, guilty) = match &keys {
            Key::Zero(k) => {
                let g = generate(k, &self.model, &k.policy(), &q, rng, GenLimits::blocks(self.blocks));
                let ranges = g.block_ranges();
                (g.text, ranges, None, BTreeSet::new())
            }
            Key::Lbit(k) => {
                let m = Message::random(k.len(), rng);
                let e = lbit::encode_with(k, &m, &self.model, &q, rng, &self.budget())?;
                let ranges = e.block_ranges();
                (e.text, ranges, Some(m), BTreeSet::new())
            }
            Key::Multi(k) => {
                let u = rng.gen_range(0..k.n());
                let e = mu_wat_with(k, u, &q, &self.model, rng, &self.budget())?;
                let ranges = e.block_ranges();
                (e.text, ranges, Some(k.codebook.row(u).clone()), BTreeSet::from([u]))
            }
        };
        let text = self.attack(vec![(text, ranges)], rng)?;
        keys.judge(trial, &text, word.as_ref(), guilty, sc.delta)
    }

    fn collusion(&self, trial: usize, rng: &mut ChaCha20Rng) -> Outcome<Record> {
        let sc = &self.scenario.scheme;
        let keys = fresh_key(sc, self.fp.as_ref(), rng)?;
        let Key::Multi(key) = &keys else {
            unreachable!("checked when planning");
        };
        let users: Vec<usize> = (0..key.n()).collect();
        let coalition: BTreeSet<usize> = users.choose_multiple(rng, key.tk.params.c).copied().collect();
        let q = Prompt::empty();
        let generations = coalition
            .iter()
            .map(|&u| {
                let e = mu_wat_with(key, u, &q, &self.model, rng, &self.budget())?;
                let ranges = e.block_ranges();
                Ok((e.text, ranges))
            })
            .collect::<Outcome<Vec<_>>>()?;
        let text = self.attack(generations, rng)?;
        keys.judge(trial, &text, None, coalition, sc.delta)
    }

    fn budget(&self) -> EncodeOptions {
        EncodeOptions {
            block_budget: Some(self.blocks),
            policy: None,
        }
    }

    /// Applies the adversary, then the channel.
    fn attack(&self, generations: Vec<(TokenSeq, Vec<Range<usize>>)>, rng: &mut ChaCha20Rng) -> Outcome<TokenSeq> {
        let (text, ranges) = match (&self.scenario.adversary, self.keep) {
            (Adversary::BlockSplice { filler, .. }, Some(keep)) => {
                let filler = filler.then(|| {
                    let len = generations.iter().map(|(t, _)| t.len()).max().unwrap_or(0);
                    TokenSeq::from_bits((0..len).map(|_| rng.gen::<bool>()))
                });
                let (text, chosen) = block_splice(&generations, keep, filler.as_ref(), rng)?;
                let ranges = spliced_ranges(&generations, &chosen);
                (text, ranges)
            }
            _ => generations.into_iter().next().unwrap_or_default(),
        };
        match &self.scenario.channel {
            Some(ch) => Ok(apply_channel(ch, &text, &ranges, rng)?.0),
            None => Ok(text),
        }
    }
}

/// Block positions in a splice without filler: the pieces back to back.
fn spliced_ranges(generations: &[(TokenSeq, Vec<Range<usize>>)], chosen: &[BlockRef]) -> Vec<Range<usize>> {
    let mut at = 0;
    chosen
        .iter()
        .map(|r| {
            let len = generations[r.colluder].1[r.block].len();
            at += len;
            at - len..at
        })
        .collect()
}

fn fresh_key(sc: &SchemeConfig, fp: Option<&FpParams>, rng: &mut ChaCha20Rng) -> Outcome<Key> {
    Ok(match (sc.level, fp) {
        (Level::Zero, _) => Key::Zero(keygen0(sc.lambda, rng)?),
        (Level::Lbit, _) => Key::Lbit(keygen_l(sc.lambda, sc.len.unwrap_or(0), rng)?),
        (Level::Multi, Some(p)) => Key::Multi(Box::new(mu_keygen(p, rng)?)),
        (Level::Multi, None) => unreachable!("checked when planning"),
    })
}

impl Key {
    /// Runs the level's detector on `text` and compares with what went in.
    fn judge(
        &self,
        trial: usize,
        text: &TokenSeq,
        word: Option<&Message>,
        guilty: BTreeSet<usize>,
        delta: f64,
    ) -> Outcome<Record> {
        let mut rec = Record {
            trial,
            text_len: text.len(),
            detected: false,
            erasures: None,
            bits_recovered: None,
            bits_wrong: None,
            in_ball: None,
            guilty: None,
            accused: None,
        };
        let m_hat = match self {
            Key::Zero(k) => {
                rec.detected = detect0(k, text);
                return Ok(rec);
            }
            Key::Lbit(k) => lbit::extract(k, text),
            Key::Multi(k) => {
                let rep = mu_trace_report(k, text, None)?;
                rec.accused = Some(rep.accused);
                rec.guilty = Some(guilty);
                rep.message.parse::<PartialMessage>()?
            }
        };
        rec.detected = !m_hat.is_all_erased();
        rec.erasures = Some(m_hat.count(Symbol::Erased));
        if let Some(m) = word {
            let (mut right, mut wrong) = (0, 0);
            for (s, &b) in m_hat.symbols().iter().zip(m.bits()) {
                match s.bit() {
                    Some(v) if v == b => right += 1,
                    Some(_) => wrong += 1,
                    None => {}
                }
            }
            rec.bits_recovered = Some(right);
            rec.bits_wrong = Some(wrong);
            rec.in_ball = Some(erasure_ball_contains(m, &m_hat, delta)?);
        }
        Ok(rec)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Aggregates computed from the records alone.
pub fn aggregate(records: &[Record]) -> Aggregates {
    let trials = records.len();
    let rate = |n: usize| n as f64 / trials.max(1) as f64;
    let traced: Vec<(&BTreeSet<usize>, &BTreeSet<usize>)> = records
        .iter()
        .filter_map(|r| Some((r.accused.as_ref()?, r.guilty.as_ref()?)))
        .collect();
    let (mut accused, mut hits, mut guilty, mut success) = (0, 0, 0, 0);
    for (a, g) in &traced {
        accused += a.len();
        hits += a.intersection(g).count();
        guilty += g.len();
        success += usize::from(!a.is_empty() && a.is_subset(g));
    }
    let any_traced = !traced.is_empty();
    Aggregates {
        trials,
        detection_rate: rate(records.iter().filter(|r| r.detected).count()),
        mean_erasures: mean(records.iter().filter_map(|r| r.erasures.map(|e| e as f64))),
        mean_bits_recovered: mean(records.iter().filter_map(|r| r.bits_recovered.map(|e| e as f64))),
        in_ball_rate: mean(records.iter().filter_map(|r| r.in_ball.map(|b| f64::from(u8::from(b))))),
        trace_precision: (accused > 0).then(|| hits as f64 / accused as f64),
        trace_recall: (guilty > 0).then(|| hits as f64 / guilty as f64),
        trace_success_rate: (any_traced && guilty > 0).then(|| success as f64 / traced.len() as f64),
        false_accusations: any_traced.then_some(accused - hits),
    }
}

/// Runs every trial of `scenario` on `jobs` worker threads.
pub fn run(scenario: Scenario, seed: u64, jobs: usize) -> Outcome<ExperimentReport> {
    let plan = Plan::new(scenario, seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Failure::usage(format!("cannot start {jobs} workers: {e}")))?;
    let records = pool.install(|| {
        (0..plan.scenario.trials)
            .into_par_iter()
            .map(|t| plan.run(t))
            .collect::<Outcome<Vec<_>>>()
    })?;
    let aggregates = aggregate(&records);
    let mut scenario = plan.scenario;
    scenario.seed = Some(seed);
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        scenario,
        seed,
        records,
        aggregates,
        timing: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(detected: bool, accused: &[usize], guilty: &[usize]) -> Record {
        Record {
            trial: 0,
            text_len: 0,
            detected,
            erasures: Some(1),
            bits_recovered: None,
            bits_wrong: None,
            in_ball: None,
            guilty: Some(guilty.iter().copied().collect()),
            accused: Some(accused.iter().copied().collect()),
        }
    }

    #[test]
    fn aggregates_follow_records() {
        let recs = [
            record(true, &[1], &[1, 2]),
            record(true, &[1, 3], &[1, 2]),
            record(false, &[], &[0, 4]),
        ];
        let a = aggregate(&recs);
        assert_eq!(a.trials, 3);
        assert!((a.detection_rate - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.false_accusations, Some(1));
        assert_eq!(a.trace_precision, Some(2.0 / 3.0));
        assert_eq!(a.trace_recall, Some(2.0 / 6.0));
        assert_eq!(a.trace_success_rate, Some(1.0 / 3.0));
        assert_eq!(a.mean_erasures, Some(1.0));
        assert_eq!(a.mean_bits_recovered, None);
    }

    fn scenario(json: &str) -> Scenario {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn planning_fills_defaults() {
        let s = scenario(r#"{"kind":"collusion","scheme":{"level":"multi","lambda":3,"n":16,"c":2,"delta":0.2,"length_scale":10},"adversary":{"type":"block_splice"},"trials":1}"#);
        let plan = Plan::new(s, 0).unwrap();
        assert_eq!(plan.keep, Some(854));
        assert_eq!(plan.blocks, 534);
        assert_eq!(plan.scenario.scheme.z_scale, Some(markbench::fpcode::Z_SCALE_A10));
    }

    #[test]
    fn bad_scenarios_are_rejected() {
        for json in [
            r#"{"kind":"soundness","scheme":{"level":"zero","lambda":8},"trials":0}"#,
            r#"{"kind":"soundness","scheme":{"level":"lbit","lambda":8},"trials":1}"#,
            r#"{"kind":"collusion","scheme":{"level":"lbit","lambda":8,"L":4},"trials":1}"#,
            r#"{"kind":"collusion","scheme":{"level":"multi","lambda":3,"n":4,"c":2},"trials":1}"#,
            r#"{"kind":"soundness","scheme":{"level":"zero","lambda":8,"delta":1.0},"trials":1}"#,
        ] {
            assert!(matches!(Plan::new(scenario(json), 0), Err(Failure::Validation(_))), "{json}");
        }
    }
}
