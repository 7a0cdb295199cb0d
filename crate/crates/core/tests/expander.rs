use std::collections::HashMap;
use std::time::Instant;

use lpsnet::archspec::{catalog, initial_spec, NetworkSpec};
use lpsnet::expander::{
    expand, surrogate_oracle, target_latency, Candidate, Evaluator, ExpandError, Memoized, SearchOptions,
    SurrogateOracle,
};

/// Counts how often each spec reaches the wrapped evaluator.
struct Counting {
    inner: SurrogateOracle,
    seen: HashMap<(String, &'static str), usize>,
}

impl Evaluator for Counting {
    fn perf(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        *self.seen.entry((spec.to_compact(), "perf")).or_default() += 1;
        self.inner.perf(spec)
    }

    fn lat(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        *self.seen.entry((spec.to_compact(), "lat")).or_default() += 1;
        self.inner.lat(spec)
    }
}

#[test]
fn surrogate_run_is_fast_monotone_and_consistent() {
    let start = Instant::now();
    let mut eval = Memoized::new(surrogate_oracle(3));
    let traj = expand(&initial_spec(), 5, &mut eval, SearchOptions::default()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(traj.steps.len(), 5);
    assert!(traj.stopped.is_none());

    let mut prev = (traj.origin.clone(), traj.origin_lat_ms);
    for step in &traj.steps {
        assert_eq!(step.spec, prev.0.apply(&step.op, step.k).unwrap());
        assert!(step.lat_ms > prev.1);
        prev = (step.spec.clone(), step.lat_ms);
    }
}

#[test]
fn recorded_candidates_satisfy_the_selection_rules() {
    let mut eval = Memoized::new(surrogate_oracle(8));
    let traj = expand(&initial_spec(), 6, &mut eval, SearchOptions::default()).unwrap();
    let mut prev = traj.origin.clone();
    for step in &traj.steps {
        let chosen = step.candidates.iter().find(|c| c.op_index == step.op.index()).unwrap();
        let best = chosen.ratio.unwrap();
        for c in step.candidates.iter().filter(|c| c.excluded.is_none()) {
            assert!(best >= c.ratio.unwrap(), "step {}: op {} beats the choice", step.index, c.op_index);
        }
        // Every earlier candidate with the same ratio would have won the tie.
        for c in step.candidates.iter().take_while(|c| c.op_index != step.op.index()) {
            assert!(c.ratio.is_none_or(|r| r < best));
        }

        let (target, probes) = target_latency(&prev, catalog(), &mut eval).unwrap();
        assert_eq!(target, step.target_lat_ms);
        assert_eq!(target, probes.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max));
        prev = step.spec.clone();
    }
}

#[test]
fn memoization_calls_inner_once_per_spec() {
    let mut eval = Memoized::new(Counting {
        inner: surrogate_oracle(1),
        seen: HashMap::new(),
    });
    expand(&initial_spec(), 4, &mut eval, SearchOptions::default()).unwrap();
    assert!(eval.inner().seen.values().all(|&n| n == 1));
    assert_eq!(eval.inner_calls, eval.inner().seen.len());
}

#[test]
fn persistent_cache_resumes_without_new_calls() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("evaluations.csv");
    let first = {
        let mut eval = Memoized::persistent(surrogate_oracle(2), &log).unwrap();
        let t = expand(&initial_spec(), 3, &mut eval, SearchOptions::default()).unwrap();
        assert!(eval.inner_calls > 0);
        t
    };
    let mut eval = Memoized::persistent(surrogate_oracle(2), &log).unwrap();
    let second = expand(&initial_spec(), 3, &mut eval, SearchOptions::default()).unwrap();
    assert_eq!(eval.inner_calls, 0);
    assert_eq!(first, second);
}

#[test]
fn trajectory_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut eval = Memoized::new(surrogate_oracle(4));
    let traj = expand(&initial_spec(), 2, &mut eval, SearchOptions::default()).unwrap();
    traj.write_dir(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 1 + 2);
    assert!(text.starts_with("step,dimension,op_index,k,depths,widths,ratios,perf_pct,lat_ms"));
    let tradeoff = std::fs::read_to_string(dir.path().join("tradeoff.csv")).unwrap();
    assert_eq!(tradeoff.lines().count(), 4);

    let mut rd = csv::Reader::from_path(dir.path().join("candidates_step1.csv")).unwrap();
    let rows: Vec<Candidate> = rd.deserialize().collect::<Result<_, _>>().unwrap_or_default();
    let raw = std::fs::read_to_string(dir.path().join("candidates_step1.csv")).unwrap();
    assert_eq!(raw.lines().count(), 1 + catalog().len());
    assert!(rows.is_empty() || rows.len() == catalog().len());
}

#[test]
fn zero_steps_is_an_error() {
    let mut eval = surrogate_oracle(0);
    assert!(matches!(
        expand(&initial_spec(), 0, &mut eval, SearchOptions::default()),
        Err(ExpandError::ZeroSteps)
    ));
}
