//! A small synthetic world wired through every stage with parametric mocks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use demo_forge::harvest::{harvest, HarvestConfig, HarvestReport};
use demo_forge::infer::{evaluate, write_results, EvalReport, InferenceConfig};
use demo_forge::llm::{Backend, ParametricMock};
use demo_forge::promptkit::ShotPool;
use demo_forge::refine::{refine, RefineConfig, RefineReport};
use demo_forge::stage::{Env, PipelineError};
use demo_forge::store::{read_pool, RunDir};
use demo_forge::synth::{World, WorldConfig};

pub struct Setup {
    pub world: World,
    pub harvest: HarvestConfig,
    pub refine: RefineConfig,
    pub infer: InferenceConfig,
    pub harvest_mock: ParametricMock,
    pub campaign_mock: ParametricMock,
    pub infer_mock: ParametricMock,
}

pub fn setup(world: WorldConfig, min_uses: u32) -> Setup {
    let w = World::generate(&world);
    let harvest = HarvestConfig {
        train_subset_size: w.train.len(),
        seed: 11,
        ..Default::default()
    };
    let refine = RefineConfig {
        min_uses,
        pairing_seed: 5,
        ..Default::default()
    };
    let infer = InferenceConfig {
        n_attempts: 5,
        n_shots: 6,
        seed: 3,
        ..Default::default()
    };
    Setup {
        harvest_mock: ParametricMock::new(w.harvest_mock(1)),
        campaign_mock: ParametricMock::new(w.campaign_mock(2, 0.3)),
        infer_mock: ParametricMock::new(w.inference_mock(4, 0.2, 0.03)),
        world: w,
        harvest,
        refine,
        infer,
    }
}

pub fn small() -> Setup {
    setup(
        WorldConfig {
            train: 120,
            test: 30,
            ..Default::default()
        },
        15,
    )
}

pub fn run_harvest(s: &Setup, backend: &dyn Backend, run: &RunDir, workers: usize) -> Result<HarvestReport, PipelineError> {
    let seed_pool = ShotPool::new(s.world.seed_pool.clone());
    harvest(&s.harvest, &s.world.train_samples(), &seed_pool, &Env::new(backend).workers(workers), run)
}

pub fn run_refine(s: &Setup, backend: &dyn Backend, run: &RunDir, workers: usize) -> Result<RefineReport, PipelineError> {
    refine(&s.refine, &Env::new(backend).workers(workers), run)
}

pub fn run_infer(s: &Setup, backend: &dyn Backend, run: &RunDir, workers: usize) -> Result<EvalReport, PipelineError> {
    let (_, demos) = read_pool(run.pool_merged())?;
    let rep = evaluate(
        &s.world.test_samples(),
        &s.infer,
        &ShotPool::new(demos),
        &Env::new(backend).workers(workers),
        None,
        Some(run),
    )?;
    write_results(run.results(), &rep)?;
    Ok(rep)
}

pub fn run_all(s: &Setup, run: &RunDir, workers: usize) -> (HarvestReport, RefineReport, EvalReport) {
    let h = run_harvest(s, &s.harvest_mock, run, workers).unwrap();
    let r = run_refine(s, &s.campaign_mock, run, workers).unwrap();
    let e = run_infer(s, &s.infer_mock, run, workers).unwrap();
    (h, r, e)
}

/// Every stage output whose bytes must not depend on scheduling. Ledgers
/// that are appended as attempts finish are excluded.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let name = p.strip_prefix(root).unwrap().display().to_string();
            if name == "attempts.jsonl" || name == "one_shot_results.jsonl" {
                continue;
            }
            out.insert(name, fs::read(&p).unwrap());
        }
    }
    out
}
