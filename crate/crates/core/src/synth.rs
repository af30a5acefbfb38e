//! Synthetic table-QA worlds for exercising the pipeline without a model.
//!
//! Every sample carries a gold program and a difficulty tier. Mock backend
//! configurations derived from a world make harvest, refine and infer
//! behave in a controlled way: tiers set per-sample success rates while
//! harvesting, and a chosen subset of the tricky samples is useful as a
//! demonstration.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::Answer;
use crate::domain::{
    AnswerType, Demonstration, IntermediateSteps, Provenance, QuestionType, Sample, SampleMeta, Table,
};
use crate::dsl::{eval_program, parse_program};
use crate::llm::ParametricConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Hard,
    Tricky,
    Medium,
    Easy,
}

impl Tier {
    /// Per-attempt success probability while harvesting.
    pub fn harvest_base(self) -> f64 {
        match self {
            Tier::Hard => 0.0,
            Tier::Tricky => 0.1,
            Tier::Medium => 0.5,
            Tier::Easy => 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub sample: Sample,
    pub program: String,
    pub tier: Tier,
}

const TOPICS: [(&str, &str); 4] = [
    ("Player", "Points"),
    ("City", "Population"),
    ("Store", "Sales"),
    ("Team", "Wins"),
];

const NAMES: [&str; 12] = [
    "Ana", "Bo", "Cyd", "Dee", "Eli", "Fay", "Gus", "Hal", "Ivy", "Jo", "Kit", "Lu",
];

/// One random table question with its gold program.
pub fn synth_sample(id: &str, rng: &mut impl Rng) -> Sample {
    synth_with_program(id, rng).0
}

fn synth_with_program(id: &str, rng: &mut impl Rng) -> (Sample, String) {
    let (entity, metric) = TOPICS[rng.random_range(0..TOPICS.len())];
    let n_rows = rng.random_range(3..=6);
    let mut names = NAMES.to_vec();
    names.shuffle(rng);
    let mut values: Vec<u32> = (1..=99).collect();
    values.shuffle(rng);
    let rows: Vec<Vec<String>> = (0..n_rows)
        .map(|i| vec![names[i].to_string(), values[i].to_string()])
        .collect();
    let table = Table::new(None, vec![entity.to_string(), metric.to_string()], rows).expect("rectangular");
    let lower = entity.to_lowercase();
    let m = format!("to_number(w['{metric}'])");
    let e = format!("w['{entity}']");
    let pivot = values[rng.random_range(0..n_rows)];
    let who = names[rng.random_range(0..n_rows)];
    let (question, program, answer_type) = match rng.random_range(0..6) {
        0 => (
            format!("Which {lower} has the highest {}?", metric.to_lowercase()),
            format!("argmax({m} -> {e})"),
            AnswerType::ExtractiveText,
        ),
        1 => (
            format!("Which {lower} has the lowest {}?", metric.to_lowercase()),
            format!("argmin({m} -> {e})"),
            AnswerType::ExtractiveText,
        ),
        2 => (
            format!("What is the total {}?", metric.to_lowercase()),
            format!("sum({m})"),
            AnswerType::IntegerNumber,
        ),
        3 => (
            format!("How many {lower} entries have {} above {pivot}?", metric.to_lowercase()),
            format!("count(filter({e}, {m} > {pivot}))"),
            AnswerType::IntegerNumber,
        ),
        4 => (
            format!("What is the average {}?", metric.to_lowercase()),
            format!("avg({m})"),
            AnswerType::DecimalNumber,
        ),
        _ => (
            format!("Is the {} of {who} greater than {pivot}?", metric.to_lowercase()),
            format!("max(filter({m}, {e} == '{who}')) > {pivot}"),
            AnswerType::BooleanText,
        ),
    };
    let gold = eval_program(&parse_program(&program).expect("template parses"), &table).expect("template evaluates");
    let meta = SampleMeta {
        question_type: QuestionType::FreeText,
        answer_type,
        ..Default::default()
    };
    let sample = Sample::new(id, question, Answer::new(gold.raw()), Some(table), meta).expect("valid sample");
    (sample, program)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub seed_pool: usize,
    /// Relative weights of hard, tricky, medium and easy training samples.
    pub tier_weights: [u32; 4],
    /// Fraction of tricky samples that are useful demonstrations.
    pub useful_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train: 200,
            test: 100,
            seed_pool: 4,
            tier_weights: [35, 25, 20, 20],
            useful_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
    pub seed_pool: Vec<Demonstration>,
    pub useful: BTreeSet<String>,
}

/// Exact tier counts by largest remainder.
fn tier_counts(n: usize, weights: [u32; 4]) -> [usize; 4] {
    let total: u64 = weights.iter().map(|&w| w as u64).sum::<u64>().max(1);
    let mut counts = weights.map(|w| (n as u64 * w as u64 / total) as usize);
    let mut rem: Vec<(u64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((n as u64 * w as u64) % total, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - counts.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

impl World {
    pub fn generate(cfg: &WorldConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let counts = tier_counts(cfg.train, cfg.tier_weights);
        let mut tiers: Vec<Tier> = [Tier::Hard, Tier::Tricky, Tier::Medium, Tier::Easy]
            .iter()
            .zip(counts)
            .flat_map(|(&t, c)| std::iter::repeat_n(t, c))
            .collect();
        tiers.shuffle(&mut rng);
        let train: Vec<SynthSample> = tiers
            .into_iter()
            .enumerate()
            .map(|(i, tier)| {
                let (sample, program) = synth_with_program(&format!("t{i:05}"), &mut rng);
                SynthSample { sample, program, tier }
            })
            .collect();
        let test = (0..cfg.test)
            .map(|i| {
                let (sample, program) = synth_with_program(&format!("q{i:05}"), &mut rng);
                SynthSample {
                    sample,
                    program,
                    tier: Tier::Medium,
                }
            })
            .collect();
        let seed_pool = (0..cfg.seed_pool)
            .map(|i| {
                let (sample, program) = synth_with_program(&format!("seed{i:03}"), &mut rng);
                Demonstration {
                    sample,
                    steps: IntermediateSteps::dsl(program).expect("template parses"),
                    provenance: Provenance::Handcrafted,
                    difficulty: None,
                    utility: None,
                }
            })
            .collect();
        let mut useful = BTreeSet::new();
        for s in train.iter().filter(|s| s.tier == Tier::Tricky) {
            if rng.random::<f64>() < cfg.useful_fraction {
                useful.insert(s.sample.id.clone());
            }
        }
        Self {
            train,
            test,
            seed_pool,
            useful,
        }
    }

    pub fn train_samples(&self) -> Vec<Sample> {
        self.train.iter().map(|s| s.sample.clone()).collect()
    }

    pub fn test_samples(&self) -> Vec<Sample> {
        self.test.iter().map(|s| s.sample.clone()).collect()
    }

    fn solutions(&self) -> BTreeMap<String, String> {
        self.train
            .iter()
            .chain(&self.test)
            .map(|s| (s.sample.id.clone(), s.program.clone()))
            .collect()
    }

    /// Harvest behaviour: success rate by tier, shots do not matter.
    pub fn harvest_mock(&self, seed: u64) -> ParametricConfig {
        ParametricConfig {
            seed,
            base: 0.0,
            gain: 0.0,
            base_overrides: self
                .train
                .iter()
                .map(|s| (s.sample.id.clone(), s.tier.harvest_base()))
                .collect(),
            solutions: self.solutions(),
            ..Default::default()
        }
    }

    /// One-shot behaviour: unsolved queries are only solved with a useful
    /// shot, with probability `gain`.
    pub fn campaign_mock(&self, seed: u64, gain: f64) -> ParametricConfig {
        ParametricConfig {
            seed,
            base: 0.0,
            gain,
            useful: self.useful.clone(),
            solutions: self.solutions(),
            ..Default::default()
        }
    }

    /// Inference behaviour: `base + gain * useful shots in context`.
    pub fn inference_mock(&self, seed: u64, base: f64, gain: f64) -> ParametricConfig {
        ParametricConfig {
            seed,
            base,
            gain,
            useful: self.useful.clone(),
            solutions: self.solutions(),
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::answers_equal;

    #[test]
    fn gold_programs_reproduce_gold() {
        let w = World::generate(&WorldConfig::default());
        for s in w.train.iter().chain(&w.test) {
            let got = eval_program(&parse_program(&s.program).unwrap(), s.sample.table.as_ref().unwrap()).unwrap();
            assert!(answers_equal(&got, &s.sample.answer), "{}", s.sample.id);
        }
        assert_eq!(w.seed_pool.len(), 4);
    }

    #[test]
    fn tiers_are_exact() {
        assert_eq!(tier_counts(200, [35, 25, 20, 20]), [70, 50, 40, 40]);
        assert_eq!(tier_counts(7, [1, 1, 1, 0]).iter().sum::<usize>(), 7);
        let w = World::generate(&WorldConfig::default());
        assert_eq!(w.train.iter().filter(|s| s.tier == Tier::Hard).count(), 70);
        assert!(w.useful.iter().all(|id| id.starts_with('t')));
    }

    #[test]
    fn generation_is_seeded() {
        let a = World::generate(&WorldConfig::default());
        let b = World::generate(&WorldConfig::default());
        assert_eq!(a, b);
        let c = World::generate(&WorldConfig {
            seed: 8,
            ..Default::default()
        });
        assert_ne!(a.train, c.train);
    }
}
