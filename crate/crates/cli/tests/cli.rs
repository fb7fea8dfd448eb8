use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scenecast::sampler::{read_predictions, write_predictions, ModalitySet, Orientation, ScenePrediction};
use scenecast::scene::io::read_scenes;
use scenecast::scene::Scene;
use tempfile::TempDir;

/// Tiny models so every test trains in seconds.
const SMALL: &str = r#"
[model]
dim = 8

[decoder_train]
epochs = 1
batch_size = 4

[recombiner]
dim = 8

[recombiner_train]
epochs = 1
batch_size = 4

[trajectory_train]
epochs = 1
"#;

const SINGLE_AGENT: &str = r#"
[generator]
min_agents = 1
max_agents = 1
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Sandbox {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Sandbox { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_scenecast"))
            .args(args)
            .arg("--config")
            .arg(self.path("run.toml"))
            .env("SCENECAST_DATA_DIR", self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8_lossy(&out.stderr).into_owned()
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.path(name)).unwrap()
    }

    /// Data plus a trained decoder.
    fn with_decoder(config: &str, count: usize) -> Sandbox {
        let sb = Sandbox::new(config);
        sb.ok(&["gen-data", "--count", &count.to_string()]);
        sb.ok(&["train", "--stage", "decoder"]);
        sb
    }

    fn predictions(&self, name: &str) -> Vec<ScenePrediction> {
        read_predictions(std::fs::File::open(self.path(name)).map(std::io::BufReader::new).unwrap()).unwrap()
    }

    fn scenes(&self) -> Vec<Scene> {
        read_scenes(std::io::BufReader::new(std::fs::File::open(self.path("scenes.jsonl")).unwrap())).unwrap()
    }

    /// Files in the sandbox other than the inputs, temporaries included.
    fn listing(&self) -> Vec<String> {
        let mut names: Vec<String> =
            std::fs::read_dir(self.dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        names
    }
}

#[test]
fn gen_data_writes_the_requested_records_reproducibly() {
    let sb = Sandbox::new("");
    sb.ok(&["gen-data", "--count", "10", "--seed", "3"]);
    let first = sb.read("scenes.jsonl");
    assert_eq!(first.lines().count(), 11);
    assert_eq!(sb.scenes().len(), 10);
    assert!(sb.read("scenes.jsonl.config.toml").contains("seed = 3"));
    sb.ok(&["gen-data", "--count", "10", "--seed", "3"]);
    assert_eq!(sb.read("scenes.jsonl"), first);
    sb.ok(&["gen-data", "--count", "10", "--seed", "4"]);
    assert_ne!(sb.read("scenes.jsonl"), first);
}

#[test]
fn gen_data_with_zero_count_writes_only_the_header() {
    let sb = Sandbox::new("");
    sb.ok(&["gen-data", "--count", "0"]);
    assert_eq!(sb.read("scenes.jsonl").lines().count(), 1);
    assert!(sb.scenes().is_empty());
}

#[test]
fn gen_data_into_an_unwritable_location_fails() {
    let sb = Sandbox::new("");
    std::fs::write(sb.path("blocker"), "").unwrap();
    let out = sb.path("blocker").join("scenes.jsonl");
    let err = sb.fails(&["gen-data", "--count", "2", "--out", out.to_str().unwrap()]);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn invalid_configuration_is_rejected() {
    let sb = Sandbox::new("");
    sb.fails(&["gen-data", "--k", "0"]);
    sb.fails(&["gen-data", "--radius", "-1"]);
    let bad = Sandbox::new("[sampler]\nkk = 3\n");
    assert!(bad.fails(&["gen-data"]).contains("kk"));
    assert!(!sb.path("scenes.jsonl").exists());
}

#[test]
fn recombiner_training_requires_the_decoder_stage() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&["gen-data", "--count", "4"]);
    let err = sb.fails(&["train", "--stage", "recombiner"]);
    assert!(err.contains("decoder"), "{err}");
    assert!(!sb.path("recombiner.ckpt").exists());
}

#[test]
fn staged_training_writes_checkpoints_and_loss_logs() {
    let sb = Sandbox::with_decoder(SMALL, 6);
    sb.ok(&["train", "--stage", "trajectory"]);
    sb.ok(&["train", "--stage", "recombiner"]);
    for name in ["decoder.ckpt", "trajectory.ckpt", "recombiner.ckpt"] {
        let log = sb.read(&format!("{name}.loss.csv"));
        assert_eq!(log.lines().next(), Some("epoch,loss"));
        assert_eq!(log.lines().count(), 2);
        assert!(sb.path(&format!("{name}.config.toml")).exists());
    }
    assert!(sb.read("recombiner.ckpt.config.toml").contains("enc_dim = 8"));
    sb.ok(&["predict", "--mode", "joint-recombined", "--trajectory", sb.path("trajectory.ckpt").to_str().unwrap()]);
    let preds = sb.predictions("predictions-joint-recombined.jsonl");
    let set = &preds[0].set;
    let trajs = set.trajectories.as_ref().unwrap();
    assert_eq!(trajs.len(), set.num_agents());
    assert!(trajs.iter().all(|row| row.len() == 6 && row.iter().all(|t| t.len() == 30)));
}

#[test]
fn single_agent_scenes_predict_the_same_marginally_and_jointly() {
    let sb = Sandbox::with_decoder(&format!("{SMALL}{SINGLE_AGENT}"), 4);
    sb.ok(&["predict", "--mode", "marginal"]);
    sb.ok(&["predict", "--mode", "joint-algo"]);
    let m = sb.predictions("predictions-marginal.jsonl");
    let j = sb.predictions("predictions-joint-algo.jsonl");
    assert_eq!(m.len(), 4);
    for (a, b) in m.iter().zip(&j) {
        assert_eq!(a.set.orientation, Orientation::Marginal);
        assert_eq!(b.set.orientation, Orientation::Joint);
        assert_eq!(a.set.num_agents(), 1);
        assert_eq!(a.set.endpoints, b.set.endpoints);
    }
    sb.ok(&["train", "--stage", "recombiner"]);
    sb.ok(&["predict", "--mode", "joint-recombined"]);
    let r = sb.predictions("predictions-joint-recombined.jsonl");
    assert!(r.iter().all(|p| p.set.orientation == Orientation::Joint && p.set.k() == 6));
}

#[test]
fn predictions_are_deterministic_and_scored_against_ground_truth() {
    let sb = Sandbox::with_decoder(SMALL, 5);
    sb.ok(&["predict", "--mode", "joint-algo"]);
    let first = sb.read("predictions-joint-algo.jsonl");
    sb.ok(&["predict", "--mode", "joint-algo"]);
    assert_eq!(sb.read("predictions-joint-algo.jsonl"), first);

    let out = sb.ok(&["evaluate", "--predictions", sb.path("predictions-joint-algo.jsonl").to_str().unwrap()]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("jointFDE") && table.contains("joint-algo"), "{table}");
    let report: serde_json::Value = serde_json::from_str(&sb.read("report.json")).unwrap();
    assert_eq!(report["d_col"], 2.0);
    assert_eq!(report["reports"][0][0], "joint-algo");
    assert!(report["reports"][0][1]["joint_fde"]["value"].as_f64().unwrap() >= report["reports"][0][1]["m_fde"]["value"].as_f64().unwrap());
}

#[test]
fn perfect_predictions_score_zero() {
    let sb = Sandbox::new("");
    sb.ok(&["gen-data", "--count", "6"]);
    let preds: Vec<ScenePrediction> = sb
        .scenes()
        .iter()
        .map(|s| {
            let agents: Vec<_> = s.agents.iter().filter(|a| a.is_present() && a.endpoint().is_some()).collect();
            let ends = agents.iter().map(|a| vec![a.endpoint().unwrap(); 6]).collect();
            let set = ModalitySet::new(Orientation::Joint, agents.iter().map(|a| a.id).collect(), ends).unwrap();
            ScenePrediction { scene: s.id, mode: "truth".into(), set }
        })
        .collect();
    let mut buf = Vec::new();
    write_predictions(&mut buf, &preds).unwrap();
    std::fs::write(sb.path("truth.jsonl"), buf).unwrap();
    // Collisions are the only thing a perfect set can be charged for.
    sb.ok(&["evaluate", "--predictions", sb.path("truth.jsonl").to_str().unwrap(), "--d-col", "0"]);
    let report: serde_json::Value = serde_json::from_str(&sb.read("report.json")).unwrap();
    let r = &report["reports"][0][1];
    for key in ["m_fde", "mr", "joint_fde", "joint_mr", "col", "cmr"] {
        assert_eq!(r[key]["value"], 0.0, "{key}");
    }
}

#[test]
fn render_without_predictions_draws_lanes_and_histories_only() {
    let sb = Sandbox::new("");
    sb.ok(&["gen-data", "--count", "2"]);
    let id = sb.scenes()[0].id.to_string();
    sb.ok(&["render", "--scene", &id]);
    let svg = sb.read(&format!("scene-{id}.svg"));
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let lanes = doc.descendants().find(|n| n.attribute("id") == Some("lanes")).unwrap();
    assert_eq!(lanes.children().filter(|n| n.has_tag_name("polyline")).count(), sb.scenes()[0].lanes.len());
    assert!(doc.descendants().any(|n| n.attribute("id") == Some("agents")));
    assert!(!doc.descendants().any(|n| n.attribute("class") == Some("cell") || n.attribute("class") == Some("endpoint")));
    assert!(!doc.descendants().any(|n| n.attribute("id") == Some("predictions")));
}

#[test]
fn rendered_heatmap_is_most_opaque_at_the_peak_cell() {
    let sb = Sandbox::new("");
    sb.ok(&["gen-data", "--count", "1"]);
    let scene = &sb.scenes()[0];
    let agent = scene.agents[0].id;
    let dump = format!("#scenecast-heatmap v1\nagent {agent} W 192 R0 8 N1 16 R1 2 N2 64 R2 0.5\n0.25 0.25 0.2\n10.25 0.25 0.7\n0.25 10.25 0.1\n");
    std::fs::write(sb.path("maps.txt"), dump).unwrap();
    let id = scene.id.to_string();
    sb.ok(&["render", "--scene", &id, "--heatmaps", sb.path("maps.txt").to_str().unwrap()]);
    let svg = sb.read(&format!("scene-{id}.svg"));
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let cells: Vec<(f64, f64, f64)> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("cell"))
        .map(|n| {
            let num = |k: &str| n.attribute(k).unwrap().parse::<f64>().unwrap();
            (num("x"), num("y"), num("fill-opacity"))
        })
        .collect();
    assert_eq!(cells.len(), 3);
    let peak = cells.iter().copied().fold((0.0, 0.0, f64::NEG_INFINITY), |b, c| if c.2 > b.2 { c } else { b });
    // 10 m east of the first cell at 4 px per meter.
    assert!((peak.0 - cells[0].0 - 40.0).abs() < 0.02 && (peak.1 - cells[0].1).abs() < 0.02, "{cells:?}");
    assert_eq!(peak.2, 1.0);
}

#[test]
fn grid_mismatch_fails_without_leaving_output() {
    let sb = Sandbox::with_decoder(SMALL, 3);
    let other = Sandbox::new(&format!("{SMALL}\n[model.hier]\nr2 = 0.25\n"));
    let out = sb.path("preds.jsonl");
    let err = Command::new(env!("CARGO_BIN_EXE_scenecast"))
        .args(["predict", "--mode", "marginal", "--out", out.to_str().unwrap(), "--config"])
        .arg(other.path("run.toml"))
        .env("SCENECAST_DATA_DIR", sb.dir.path())
        .output()
        .unwrap();
    assert!(!err.status.success());
    assert!(String::from_utf8_lossy(&err.stderr).contains("grid mismatch"));
    assert!(!out.exists());
    assert!(sb.listing().iter().all(|n| !n.contains(".tmp")), "{:?}", sb.listing());
}

#[test]
fn recombined_prediction_needs_a_recombiner_checkpoint() {
    let sb = Sandbox::with_decoder(SMALL, 3);
    let err = sb.fails(&["predict", "--mode", "joint-recombined"]);
    assert!(err.contains("recombiner"), "{err}");
    assert!(!Path::new(&sb.path("predictions-joint-recombined.jsonl")).exists());
}
