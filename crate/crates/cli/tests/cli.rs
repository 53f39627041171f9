use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ddnet_cli::{main_with_args, DataManifest, EvalFile, LedgerReport, Summary, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use ddnet_core::idetnet::{self, IdBatch};
use ddnet_core::io;
use ddnet_core::numerics::Rng;
use serde_json::json;

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "system": { "n_t": 2, "n_r_range": [2, 4], "snr_db_range": [-5.0, 15.0], "rho_range": [0.0, 0.9] },
        "model": { "k_id": 3, "h1": 8, "h2": 4, "k_oa": 2 },
        "fed": { "total_clients": 4, "m_id": 2, "m_ro": 3, "local_steps": 1, "t_id": 3, "t_ro": 2 },
        "data": { "clients": 4, "samples_per_client": 100 },
        "train": { "id_epochs": 4, "id_batch": 32, "oa_samples": 50, "ro_epochs": 3, "ro_batch": 16 },
        "eval": { "samples_per_point": 50, "snr_points": [-5, 0, 5, 10, 15], "n_r_points": [2, 4], "rho_points": [0.0, 0.5], "include_ml": false },
        "seed": 7,
        "output_dir": dir.join("run"),
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn ddnet(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("ddnet").chain(args.iter().copied()))
}

fn cfg_arg(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn gen_data_writes_clients_and_pool_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    assert_eq!(ddnet(&["gen-data", "--config", &cfg_arg(&cfg)]), EXIT_OK);
    let data = tmp.path().join("run/data");
    let m: DataManifest = io::read_json(&data.join("manifest.json")).unwrap();
    assert_eq!(m.clients.len(), 4);
    for c in &m.clients {
        assert_eq!(io::read_dataset(&data.join(&c.file)).unwrap().len(), 100);
        let p = c.profile.as_ref().unwrap();
        assert!(p.rho_subinterval.0 >= 0.0 && p.rho_subinterval.1 <= 0.9);
        assert!(p.snr_subinterval.0 >= -5.0 && p.snr_subinterval.1 <= 15.0);
        assert!((p.snr_subinterval.1 - p.snr_subinterval.0 - 5.0).abs() < 1e-12);
    }
    assert_eq!(io::read_dataset(&data.join("pooled.bin")).unwrap().len(), 400);

    let first = fs::read(data.join("pooled.bin")).unwrap();
    let first_client = fs::read(data.join("client_002.bin")).unwrap();
    assert_eq!(ddnet(&["gen-data", "--config", &cfg_arg(&cfg)]), EXIT_OK);
    assert_eq!(fs::read(data.join("pooled.bin")).unwrap(), first);
    assert_eq!(fs::read(data.join("client_002.bin")).unwrap(), first_client);
}

#[test]
fn cl_pipeline_eval_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg_arg(&cfg);
    assert_eq!(ddnet(&["gen-data", "--config", &c]), EXIT_OK);
    assert_eq!(ddnet(&["train-cl", "--config", &c]), EXIT_OK);
    let run = tmp.path().join("run");

    // trained IDetNet improves on an untrained one
    let pooled = io::read_dataset(&run.join("data/pooled.bin")).unwrap();
    let model = io::load_bundle(&run.join("cl/bundle")).unwrap();
    let batch = IdBatch::from_samples(&pooled.samples);
    let loss = |p| idetnet::idetnet_loss(&idetnet::forward_batch(p, &model.idetnet_config, &batch).unwrap(), &batch.x);
    let init = idetnet::init_idetnet(&model.idetnet_config, &mut Rng::new(3));
    assert!(loss(&model.idetnet) < loss(&init));

    let route = io::read_route_dataset(&run.join("cl/route_dataset.bin")).unwrap();
    let ones = route.iter().filter(|r| r.label == 1).count();
    assert_eq!(2 * ones, route.len());
    assert!(fs::read_to_string(run.join("cl/log.jsonl")).unwrap().lines().count() >= 4);

    assert_eq!(ddnet(&["eval", "--config", &c, "--axis", "snr"]), EXIT_OK);
    let csv = fs::read_to_string(run.join("eval/cl_snr_db.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 4);
    let ev: EvalFile = io::read_json(&run.join("eval/cl_snr_db.json")).unwrap();
    let dd = ev.reports.iter().find(|r| r.detector == "DDNet").unwrap();
    for p in &dd.points {
        let counts = p.branch_counts.unwrap();
        assert_eq!(counts[0] + counts[1], p.samples);
    }

    // mismatched architecture
    assert_eq!(ddnet(&["eval", "--config", &c, "--set", "model.k_id=4"]), EXIT_RUNTIME);

    let run_s = run.display().to_string();
    assert_eq!(ddnet(&["report", &run_s]), EXIT_OK);
    let text = fs::read_to_string(run.join("summary.txt")).unwrap();
    let json = fs::read_to_string(run.join("summary.json")).unwrap();
    assert_eq!(ddnet(&["report", &run_s]), EXIT_OK);
    assert_eq!(fs::read_to_string(run.join("summary.txt")).unwrap(), text);
    assert_eq!(fs::read_to_string(run.join("summary.json")).unwrap(), json);

    let summary: Summary = serde_json::from_str(&json).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let mut n = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let (det, cond, ber): (&str, f64, f64) = (&rec[0], rec[2].parse().unwrap(), rec[5].parse().unwrap());
        let row = summary.rows.iter().find(|r| r.detector == det && r.condition == cond).unwrap();
        assert_eq!(row.ber, ber);
        n += 1;
    }
    assert_eq!(n, 20);
}

#[test]
fn identical_config_gives_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let mut bundles = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name).display().to_string();
        assert_eq!(ddnet(&["gen-data", "--config", &cfg_arg(&cfg), "--output-dir", &out]), EXIT_OK);
        assert_eq!(ddnet(&["train-cl", "--config", &cfg_arg(&cfg), "--output-dir", &out]), EXIT_OK);
        let dir = tmp.path().join(name).join("cl/bundle");
        bundles.push(["idetnet.bin", "oampnet.bin", "routenet.bin", "norm_stats.json"].map(|f| fs::read(dir.join(f)).unwrap()));
    }
    assert_eq!(bundles[0], bundles[1]);
}

#[test]
fn federated_ledgers_match_closed_forms() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg_arg(&cfg);
    assert_eq!(ddnet(&["gen-data", "--config", &c]), EXIT_OK);
    assert_eq!(ddnet(&["train-fedave", "--config", &c]), EXIT_OK);
    assert_eq!(ddnet(&["train-fedgs", "--config", &c, "--delta", "1.0"]), EXIT_OK);
    let run = tmp.path().join("run");
    let fa: LedgerReport = io::read_json(&run.join("fedave/ledger.json")).unwrap();
    let gs: LedgerReport = io::read_json(&run.join("fedgs/ledger.json")).unwrap();

    let phase_total = |l: &LedgerReport| -> u64 { ["idetnet", "routenet"].iter().map(|p| l.ledger.phases[*p].total()).sum() };
    assert_eq!(phase_total(&fa), fa.t_fedave);
    assert_eq!(fa.ledger.bits_index, 0);

    // idetnet: 3 epochs x 2 clients, routenet: 2 epochs x 3 clients
    let dense = gs.q_idetnet * 3 * 2 + gs.q_routenet * 2 * 3;
    let p = |l: &LedgerReport, f: fn(&ddnet_core::federated::PhaseBits) -> u64| -> u64 {
        ["idetnet", "routenet"].iter().map(|n| f(&l.ledger.phases[*n])).sum()
    };
    assert_eq!(p(&gs, |b| b.index), dense);
    assert_eq!(p(&gs, |b| b.broadcast), p(&fa, |b| b.broadcast));
    assert!(p(&gs, |b| b.upload) <= p(&fa, |b| b.upload));

    assert_eq!(ddnet(&["eval", "--config", &c, "--set", "mode=\"fedgs\"", "--axis", "mixed"]), EXIT_OK);
    assert!(run.join("eval/fedgs_mixed.csv").exists());
    assert_eq!(ddnet(&["report", &run.display().to_string()]), EXIT_OK);
    let summary: Summary = io::read_json(&run.join("summary.json")).unwrap();
    assert_eq!(summary.ledgers.len(), 2);
}

#[test]
fn report_on_empty_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(ddnet(&["report", &tmp.path().display().to_string()]), EXIT_RUNTIME);
    assert!(!tmp.path().join("summary.txt").exists());
}

#[test]
fn config_overrides_and_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let args = ddnet_cli::ConfigArgs {
        config: Some(cfg.clone()),
        overrides: vec!["fed.delta=0.25".into(), "model.k_id=5".into()],
        seed: Some(99),
        output_dir: None,
    };
    let c = ddnet_cli::load_config(&args, &[]).unwrap();
    assert_eq!((c.fed.delta, c.model.k_id, c.seed), (0.25, 5, 99));
    assert_eq!(c.model.h1, 8);

    let bad = ddnet_cli::ConfigArgs { overrides: vec!["model.bogus=1".into()], ..args.clone() };
    assert!(ddnet_cli::load_config(&bad, &[]).is_err());
    assert_eq!(ddnet(&["gen-data", "--config", &cfg_arg(&cfg), "--set", "fed.delta=3"]), EXIT_RUNTIME);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_ddnet");
    let code = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code().unwrap();
    assert_eq!(code(&["--help"]), EXIT_OK);
    assert_eq!(code(&[]), EXIT_USAGE);
    assert_eq!(code(&["train-cl", "--no-such-flag"]), EXIT_USAGE);
    assert_eq!(code(&["eval", "--axis", "sideways"]), EXIT_USAGE);
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nothing").display().to_string();
    assert_eq!(code(&["train-cl", "--output-dir", &out]), EXIT_RUNTIME);
}
