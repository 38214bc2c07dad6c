use super::*;
use crate::baselines::MaximizerConfig;
use crate::nn::TransformerConfig;

fn tiny(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        objective: ObjectiveSpec::Powell { dim: 4 },
        n_pretrain_variants: 2,
        pretrain_samples_per_variant: 12,
        eval_budget: 24,
        n_eval_variants: 2,
        seeds: vec![0, 1],
        sub_trajectory_length: 12,
        n_init: 3,
        updates_per_trajectory: 3,
        tdkl: TdklConfig { transformer: TransformerConfig::tiny(8), variance_hidden: 8, batch_size: 2, ..TdklConfig::default() },
        sac: SacConfig {
            encoder: TransformerConfig::tiny(8),
            hidden: 16,
            batch_size: 8,
            n_proposals: 32,
            ..SacConfig::default()
        },
        acquisition: AcquisitionConfig {
            maximizer: MaximizerConfig { n_starts: 32, refine_steps: 3 },
            ..AcquisitionConfig::default()
        },
        record_wall_time: false,
        ..ExperimentConfig::default()
    }
}

fn record(method: &str, seed: u64, step: usize, regret: f64) -> RegretRecord {
    RegretRecord {
        method: method.into(),
        variant_id: "v".into(),
        seed,
        step,
        x: vec![0.25, -1.0 / 3.0],
        y: -regret,
        y_best: -regret,
        regret,
        wall_time_ms: 1.5,
    }
}

#[test]
fn default_protocol_budgets() {
    let c = ExperimentConfig::default();
    assert_eq!(c.pretrain_budget(), 250);
    assert_eq!(c.eval_budget % c.sub_trajectory_length, 0);
    assert_eq!(c.eval_budget / c.sub_trajectory_length, 3);
    c.validate().unwrap();
}

#[test]
fn splitmix_reference_values() {
    assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
    let a = derive_seed(7, &[stream::EVAL_RUN, 0, 1]);
    let b = derive_seed(7, &[stream::EVAL_RUN, 1, 0]);
    let c = derive_seed(8, &[stream::EVAL_RUN, 0, 1]);
    assert!(a != b && a != c && b != c);
    assert_eq!(a, derive_seed(7, &[stream::EVAL_RUN, 0, 1]));
}

#[test]
fn parsing_and_config_json() {
    assert_eq!("ucb".parse::<Method>().unwrap(), Method::Ucb);
    assert!("mes".parse::<Method>().is_err());
    assert_eq!("powell:8".parse::<ObjectiveSpec>().unwrap(), ObjectiveSpec::Powell { dim: 8 });
    assert_eq!(
        "thomson_slice:16".parse::<ObjectiveSpec>().unwrap(),
        ObjectiveSpec::ThomsonSlice { dim: 16, base_electrons: DEFAULT_BASE_ELECTRONS }
    );
    assert!("powell".parse::<ObjectiveSpec>().is_err());
    assert_eq!("lengths=10,30,50".parse::<Sweep>().unwrap(), Sweep::SubTrajectoryLengths(vec![10, 30, 50]));
    assert_eq!(
        "surrogates=none,transformer".parse::<Sweep>().unwrap(),
        Sweep::SurrogateVariants(vec![SurrogateVariant::None, SurrogateVariant::Transformer])
    );
    assert!("depths=1".parse::<Sweep>().is_err());

    let c = tiny(Method::Ei);
    let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    let partial: ExperimentConfig =
        serde_json::from_str(r#"{"method":"pi","objective":{"family":"powell","dim":6},"seeds":[3]}"#).unwrap();
    assert_eq!(partial.method, Method::Pi);
    assert_eq!(partial.eval_budget, 150);
    assert!(ExperimentConfig { seeds: vec![], ..c.clone() }.validate().is_err());
    assert!(ExperimentConfig { n_init: 20, ..c }.validate().is_err());
}

#[test]
fn percentile_oracles() {
    let one = summarize(&[record("m", 0, 1, 0.7)]);
    assert_eq!((one[0].regret_p25, one[0].regret_p50, one[0].regret_p75), (0.7, 0.7, 0.7));
    let three = summarize(&[record("m", 0, 1, 3.0), record("m", 1, 1, 1.0), record("m", 2, 1, 2.0)]);
    assert_eq!((three[0].regret_p25, three[0].regret_p50, three[0].regret_p75), (1.5, 2.0, 2.5));
    assert_eq!(three[0].n_runs, 3);
    assert_eq!(percentile(&[0.0, 10.0], 0.3), 3.0);
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
}

#[test]
fn empty_report_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(emit_report(&[], dir.path(), true), Err(Error::NothingToReport)));
}

#[test]
fn report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for seed in 0..7u64 {
        let mut best = f64::INFINITY;
        for step in 1..=5 {
            best = best.min(((seed * 31 + step as u64 * 17) % 13) as f64 / 7.0 + 0.1 / (seed + 1) as f64);
            records.push(record("a", seed, step, best));
            records.push(record("b", seed, step, best * 0.5));
        }
    }
    let files = emit_report(&records, dir.path(), true).unwrap();
    let raw = read_raw_csv(&files.raw).unwrap();
    assert_eq!(raw, records);
    let summary = read_summary_csv(&files.summary).unwrap();
    let recomputed = summarize(&raw);
    assert_eq!(summary.len(), recomputed.len());
    for (s, r) in summary.iter().zip(&recomputed) {
        assert_eq!((&s.method, s.step, s.n_runs), (&r.method, r.step, r.n_runs));
        for (a, b) in [(s.regret_p25, r.regret_p25), (s.regret_p50, r.regret_p50), (s.regret_p75, r.regret_p75)] {
            assert!((a - b).abs() < 1e-9);
        }
    }
    let header = std::fs::read_to_string(&files.summary).unwrap();
    assert!(header.starts_with("method,step,regret_p25,regret_p50,regret_p75,n_runs\n"));
    let header = std::fs::read_to_string(&files.raw).unwrap();
    assert!(header.starts_with("method,variant_id,seed,step,x_json,y,y_best,regret,wall_time_ms\n"));
    let svg = std::fs::read_to_string(files.plot.unwrap()).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polygon") && svg.contains(">b</text>"));
    assert_eq!(load_records(dir.path()).unwrap(), records);
}

#[test]
fn pretraining_accounts_for_every_sample() {
    let before = instrument::snapshot();
    let p = run_pretraining(&tiny(Method::Rtdk)).unwrap();
    assert_eq!(p.report.evaluations, 24);
    assert_eq!(instrument::snapshot().since(&before).evaluations, 24);
    assert_eq!(p.buffer.counts().len(), 2);
    assert_eq!(p.report.surrogate_losses.len(), 6);
    assert_eq!(p.report.critic_losses.len() + p.report.rejected_steps.min(6), 6);

    let single = run_pretraining(&ExperimentConfig { n_pretrain_variants: 1, ..tiny(Method::Rtdk) }).unwrap();
    assert_eq!(single.buffer.counts().len(), 1);
    assert!(run_pretraining(&tiny(Method::Ei)).is_err());
}

fn check_runs(config: &ExperimentConfig, out: &EvaluationOutput) {
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert_eq!(out.records.len(), config.eval_budget * config.n_eval_variants * config.seeds.len());
    let mut runs: BTreeMap<(String, u64), Vec<&RegretRecord>> = BTreeMap::new();
    for r in &out.records {
        runs.entry((r.variant_id.clone(), r.seed)).or_default().push(r);
    }
    assert_eq!(runs.len(), config.n_eval_variants * config.seeds.len());
    for steps in runs.values() {
        assert_eq!(steps.len(), config.eval_budget);
        for (i, r) in steps.iter().enumerate() {
            assert_eq!(r.step, i + 1);
            assert!(r.regret >= -1e-6);
            if i > 0 {
                assert!(r.regret <= steps[i - 1].regret);
            }
        }
    }
}

use std::collections::BTreeMap;

#[test]
fn agent_evaluation_protocol() {
    let config = tiny(Method::Rtdk);
    let p = run_pretraining(&config).unwrap();
    let out = run_evaluation(&config, Some(&p)).unwrap();
    check_runs(&config, &out);
    assert!(out.episodes.iter().all(|e| *e == 2));
    assert!(out.counters.surrogate > 0 && out.counters.agent > 0);
    assert_eq!(out.counters.evaluations, 24 * 4);
    assert!(run_evaluation(&config, None).is_err());

    let online = ExperimentConfig { online_updates: true, ..config.clone() };
    check_runs(&online, &run_evaluation(&online, Some(&p)).unwrap());
}

#[test]
fn baselines_never_touch_the_agent() {
    for method in [Method::Ei, Method::Pi, Method::Ucb, Method::Random] {
        let config = tiny(method);
        let out = run_evaluation(&config, None).unwrap();
        check_runs(&config, &out);
        assert_eq!(out.counters.surrogate, 0, "{method}");
        assert_eq!(out.counters.agent, 0, "{method}");
        assert_eq!(out.counters.evaluations, 24 * 4);
    }
}

#[test]
fn runs_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(Method::Rtdk);
    let mut bytes = Vec::new();
    for (k, threads) in [1, 1, 2].into_iter().enumerate() {
        let c = ExperimentConfig { threads, ..config.clone() };
        let p = run_pretraining(&c).unwrap();
        let out = run_evaluation(&c, Some(&p)).unwrap();
        let files = emit_report(&out.records, dir.path().join(k.to_string()), false).unwrap();
        bytes.push(std::fs::read(files.raw).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(bytes[0], bytes[2]);
    let a = run_evaluation(&tiny(Method::Ei), None).unwrap();
    let b = run_evaluation(&tiny(Method::Ei), None).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn ablation_settings_share_budgets() {
    let config = ExperimentConfig { n_eval_variants: 1, seeds: vec![0], ..tiny(Method::Rtdk) };
    let lengths = run_ablation(&config, &Sweep::SubTrajectoryLengths(vec![6, 12])).unwrap();
    assert_eq!(lengths.len(), 2);
    for s in &lengths {
        assert_eq!(s.output.records.len(), 24);
        assert_eq!(s.pretrain.as_ref().unwrap().evaluations, 24);
    }
    assert_eq!(lengths[0].output.episodes, vec![4]);
    assert_eq!(lengths[1].output.episodes, vec![2]);
    assert!(lengths[0].output.records.iter().all(|r| r.method == "rtdk-L6"));

    let variants =
        run_ablation(&config, &Sweep::SurrogateVariants(vec![SurrogateVariant::None, SurrogateVariant::Transformer])).unwrap();
    let tags: Vec<&str> = variants.iter().map(|s| s.tag.as_str()).collect();
    assert_eq!(tags, ["surrogate-none", "surrogate-transformer"]);
    assert!(variants[1].output.records.iter().all(|r| r.method == "rtdk-surrogate-transformer"));
    assert!(run_ablation(&config, &Sweep::SurrogateVariants(vec![])).is_err());
}

#[test]
fn random_search_trails_expected_improvement_on_powell() {
    let base = ExperimentConfig {
        objective: ObjectiveSpec::Powell { dim: 8 },
        n_eval_variants: 3,
        seeds: vec![0, 1, 2, 3, 4],
        eval_budget: 60,
        acquisition: AcquisitionConfig {
            maximizer: MaximizerConfig { n_starts: 128, refine_steps: 10 },
            ..AcquisitionConfig::default()
        },
        record_wall_time: false,
        ..ExperimentConfig::default()
    };
    let finals = |method| {
        let c = ExperimentConfig { method, ..base.clone() };
        let out = run_evaluation(&c, None).unwrap();
        median(&final_regrets(&out.records)[&method.to_string()])
    };
    let random = finals(Method::Random);
    let ei = finals(Method::Ei);
    assert!(random > ei, "random {random} vs EI {ei}");
}
