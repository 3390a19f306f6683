use legato_core::executor::{run_episode_seeded, ExecConfig, ExecutionTrace, ExpertField, Strategy};
use legato_core::policy::Family;
use legato_core::schedule::ScheduleParams;
use legato_core::tasks::{EnvState, ReachParams, TaskSpec};
use legato_core::Chunk;
use proptest::prelude::*;

fn drifting_expert(h: usize) -> impl Fn(&EnvState) -> Chunk {
    move |s: &EnvState| {
        let values = (0..h).flat_map(|i| [0.004 + 0.001 * s.position[1], 0.003 * (i as f64 / h as f64)]).collect();
        Chunk::from_vec(h, 2, values).unwrap()
    }
}

fn run(strategy: Strategy, d: usize, s: usize, h: usize, cycles: usize, seed: u64) -> ExecutionTrace {
    let field = ExpertField::new(drifting_expert(h), strategy.required_family(), (h, 2));
    let params = ScheduleParams::new(d, h.saturating_sub(d + s), s, h).unwrap();
    let cfg = ExecConfig { stop_at_goal: false, ..ExecConfig::new(strategy, params, 4, cycles, seed) };
    run_episode_seeded(&field, &TaskSpec::BimodalReach(ReachParams::default()), &cfg).unwrap()
}

#[test]
fn trace_file_round_trip() {
    let trace = run(Strategy::Legato, 3, 8, 16, 5, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.json");
    trace.save(&path).unwrap();
    let back = ExecutionTrace::load(&path).unwrap();
    assert_eq!(back, trace);
    assert_eq!(back.to_json().unwrap(), trace.to_json().unwrap());
    assert_eq!(back.family, Family::Legato);
}

#[test]
fn corrupt_trace_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"format\": \"something-else\"}").unwrap();
    assert!(ExecutionTrace::load(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn timeline_accounting(h in 4usize..24, d_frac in 0.0f64..1.0, s_frac in 0.0f64..1.0, cycles in 1usize..6, seed in 0u64..1000) {
        let s = 1 + ((h - 1) as f64 * s_frac) as usize;
        let d = ((s.min(h - s) as f64) * d_frac) as usize;
        for strategy in Strategy::ALL {
            let t = run(strategy, d, s, h, cycles, seed);
            prop_assert_eq!(t.stream.horizon(), cycles * s);
            prop_assert_eq!(t.positions.len(), cycles * s + 1);
            prop_assert_eq!(t.cycles.len(), cycles);
            let boundaries: Vec<usize> = (1..cycles).map(|c| c * s + d).filter(|&b| b < cycles * s).collect();
            prop_assert_eq!(t.boundaries(), boundaries);
            for c in &t.cycles {
                prop_assert_eq!(c.start_step, c.index * s);
                prop_assert_eq!(c.overlap.is_some(), c.index >= 1 && d > 0);
                if let Some(o) = &c.overlap {
                    prop_assert_eq!(o.generated.horizon(), d);
                }
            }
            // The first d committed rows of each later cycle come from the previous chunk.
            for c in 1..cycles {
                for k in c * s..c * s + d {
                    prop_assert_eq!(t.sources[k], c - 1);
                }
                for k in c * s + d..(c + 1) * s {
                    prop_assert_eq!(t.sources[k], c);
                }
            }
        }
    }
}
