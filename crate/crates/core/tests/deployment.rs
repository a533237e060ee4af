use std::fs;

use ewir_core::config::ExperimentConfig;
use ewir_core::harness::{self, ImageSource, SweepAxis};
use ewir_core::link::Reply;

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let text = format!(
        "seed = 3\nunits = 3\nwidening = 6.0\nnum_classes = 10\nsplit = 2\nsymbols = 32\n\
         dataset = \"synthetic\"\nsynthetic_train = 64\nsynthetic_test = 32\n\
         backbone_epochs = 1\nbackbone_milestones = []\ncodec_epochs = 1\ncodec_milestones = []\n\
         end2end_epochs = 1\nend2end_milestones = []\n\
         out_dir = \"{}\"\ndata_root = \"{}\"\n\
         listen = \"127.0.0.1:0\"\n",
        dir.join("out").display(),
        dir.join("data").display()
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

#[test]
fn train_eval_and_sweep_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = harness::train(&cfg, &mut |_| {}).unwrap();
    assert_eq!(run.metrics.len(), 3);
    let (top1, top5) = harness::eval(&cfg).unwrap();
    assert!((0.0..=1.0).contains(&top1) && top5 >= top1);
    let res = harness::sweep(&cfg, SweepAxis::Snr, &[0.0, 20.0], &mut |_| {}).unwrap();
    assert_eq!(res.rows.len(), 2);
    let out = cfg.out_dir();
    for f in ["manifest.toml", "metrics.csv", "backbone.ckpt", "model.ckpt", "device.ckpt", "server.ckpt", "eval.csv", "sweep_snr.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("sweep_snr.csv")).unwrap();
    assert!(csv.starts_with(harness::SWEEP_HEADER));
}

#[test]
fn device_reaches_server_through_proxy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    harness::train(&cfg, &mut |_| {}).unwrap();
    let server = harness::serve(&cfg).unwrap();
    cfg.listen = server.local_addr().to_string();
    cfg.proxy_listen = "127.0.0.1:0".into();
    let proxy = harness::proxy(&cfg).unwrap();
    cfg.send_to = proxy.local_addr().to_string();
    let (reply, label) = harness::send(&cfg, &ImageSource::TestIndex(0)).unwrap();
    let Reply::Prediction(top) = reply else { panic!("error reply") };
    assert_eq!(top.len(), 5);
    assert!(label.is_some_and(|l| l < 10));
    let total: f32 = top.iter().map(|&(_, p)| p).sum();
    assert!(total > 0.0 && total <= 1.0 + 1e-6);
    assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
    proxy.shutdown();
    server.shutdown();
}

#[test]
fn out_of_range_index_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(harness::load_input(&cfg, &ImageSource::TestIndex(10_000)).is_err());
}
