//! End-to-end runs of the experiment runner on tiny configs.

use cef_core::experiment::{
    compare, load_run, read_metrics, read_sweep, read_timing, run, sweep_alpha, AlphaGrid,
    ExperimentConfig, Family,
};
use cef_core::tasks::TaskId;

fn tiny(task: TaskId, processor: Family, cef: bool) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(vec![task], processor, cef);
    c.hidden = 8;
    c.steps = 5;
    c.seeds = vec![3];
    c.eval_instances = 6;
    c
}

#[test]
fn minimal_run_writes_three_files_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(TaskId::Bfs, Family::Gnn, true);
    cfg.seeds = vec![3, 4];
    cfg.ood_eval_n = Some([9, 10]);
    let a = dir.path().join("a");
    let out = run(&cfg, &a, 2).unwrap();
    for f in ["results.json", "metrics.csv", "timing.csv"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    let metrics = read_metrics(&a.join("metrics.csv")).unwrap();
    assert!(metrics.iter().all(|m| (0.0..=1.0).contains(&m.score)));
    assert!(metrics.iter().any(|m| m.split == "ood"));
    assert_eq!(read_timing(&a.join("timing.csv")).unwrap(), out.timing);
    let bfs = &out.results.tasks["bfs"];
    assert_eq!(bfs.seeds.len(), 2);
    for s in &bfs.seeds {
        let agg = metrics
            .iter()
            .find(|m| m.seed == s.seed && m.split == "eval" && m.metric == "aggregate")
            .unwrap();
        assert_eq!(agg.score, s.eval.aggregate);
    }
    assert!(a.join("cells/bfs/seed3/model.ckpt").is_file());

    let b = dir.path().join("b");
    run(&cfg, &b, 1).unwrap();
    for f in ["results.json", "metrics.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let loaded = load_run(&a).unwrap();
    let rows = compare(&[loaded.clone(), loaded]).unwrap();
    assert!(rows.iter().all(|r| r.delta == 0.0));
}

#[test]
fn sweep_cardinality_and_reduction_cell() {
    let dir = tempfile::tempdir().unwrap();
    for processor in [Family::Gnn, Family::Transformer] {
        let mut cfg = tiny(TaskId::Minimum, processor, true);
        cfg.alpha_grid = Some(AlphaGrid {
            alpha1: vec![0.0, 0.5, 1.0],
            alpha2: vec![0.0, 0.5, 1.0],
        });
        let out = dir.path().join(format!("{processor:?}"));
        let sweep = sweep_alpha(&cfg, &out, 1).unwrap();
        assert_eq!(sweep.rows.len(), 9);
        assert_eq!(read_sweep(&out.join("sweep.csv")).unwrap(), sweep);
        let grid = std::fs::read_to_string(out.join("sweep_grid_minimum.csv")).unwrap();
        assert_eq!(grid.lines().count(), 4);

        let base = run(
            &tiny(TaskId::Minimum, processor, false),
            &out.join("base"),
            1,
        )
        .unwrap();
        let base_score = base.results.tasks["minimum"].seeds[0].eval.aggregate;
        assert_eq!(sweep.mean("minimum", 0.0, 0.0), Some(base_score));
    }
    let mut one = tiny(TaskId::Bfs, Family::Gnn, true);
    one.alpha_grid = Some(AlphaGrid {
        alpha1: vec![0.3],
        alpha2: vec![0.6],
    });
    assert_eq!(
        sweep_alpha(&one, &dir.path().join("one"), 1)
            .unwrap()
            .rows
            .len(),
        1
    );
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    let mut stack = vec![root];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "json") {
                let c =
                    ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
                assert_eq!(ExperimentConfig::parse(&c.to_json().unwrap()).unwrap(), c);
                seen += 1;
            }
        }
    }
    assert!(seen >= 10);
}
