mod common;

use std::collections::BTreeSet;

use common::{cli, p, snapshot, write_three_entry_batch};
use removal_engine::backends::fixtures::FixtureStore;
use removal_engine::bench::{load_manifest, Report};
use removal_engine::oracle::{closure_order, render, SceneGraph};
use removal_engine::raster::Image;

fn oracle_world(dir: &std::path::Path, seed: &str, n: &str) -> std::path::PathBuf {
    let world = dir.join(format!("world-{seed}-{n}"));
    assert_eq!(
        cli(&[
            "oracle",
            "--seed",
            seed,
            "--n",
            n,
            "--density",
            "0.5",
            "--out",
            p(&world)
        ]),
        0
    );
    world
}

#[test]
fn run_with_oracle_config_matches_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let world = oracle_world(dir.path(), "4", "6");
    let config = dir.path().join("removal.toml");
    std::fs::write(
        &config,
        "[backends]\nkind = \"oracle\"\nscene = \"world-4-6/scene.json\"\n",
    )
    .unwrap();
    let scene = SceneGraph::load(world.join("scene.json")).unwrap();
    let target = &scene.objects[0];
    let out = dir.path().join("run");
    let code = cli(&[
        "run",
        "--config",
        p(&config),
        "--image",
        p(&world.join("scene.png")),
        "--instruction",
        &format!("Remove the {}.", target.name),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 0);
    let result = Image::load_png(out.join("result.png")).unwrap();
    let gt = Image::load_png(world.join("gt").join(format!("{}.png", target.id))).unwrap();
    assert_eq!(result, gt);
    let echo: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["backends"]["kind"], "oracle");
}

#[test]
fn bad_invocations_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.png");
    assert_eq!(
        cli(&[
            "run",
            "--image",
            p(&missing),
            "--instruction",
            "Remove it.",
            "--out",
            p(&out)
        ]),
        2
    );
    assert_eq!(cli(&["run", "--image", p(&missing)]), 2);
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["oracle", "--n", "0", "--out", p(&out)]), 2);
    assert_eq!(
        cli(&[
            "bench",
            "--manifest",
            p(&dir.path().join("none.jsonl")),
            "--out",
            p(&out)
        ]),
        2
    );
    assert_eq!(cli(&["--version"]), 0);
}

#[test]
fn no_self_correction_flag_drops_fields() {
    let dir = tempfile::tempdir().unwrap();
    let world = oracle_world(dir.path(), "2", "4");
    let out = dir.path().join("run");
    let scene = SceneGraph::load(world.join("scene.json")).unwrap();
    let code = cli(&[
        "run",
        "--scene",
        p(&world.join("scene.json")),
        "--image",
        p(&world.join("scene.png")),
        "--instruction",
        &format!("Remove the {}.", scene.objects[1].name),
        "--no-self-correction",
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 0);
    let rec: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("result.json")).unwrap()).unwrap();
    assert!(rec.get("plan").is_some());
    assert!(rec.get("description").is_none() && rec.get("correction").is_none());
    let echo: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["pipeline"]["self_correction"], false);
}

#[test]
fn oracle_output_is_deterministic_and_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let a = oracle_world(dir.path(), "9", "8");
    let b = dir.path().join("again");
    assert_eq!(
        cli(&[
            "oracle",
            "--seed",
            "9",
            "--n",
            "8",
            "--density",
            "0.5",
            "--out",
            p(&b)
        ]),
        0
    );
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa, sb);
    assert_eq!(load_manifest(a.join("manifest.jsonl")).unwrap().len(), 8);

    let scene = SceneGraph::load(a.join("scene.json")).unwrap();
    let closures: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("closures.json")).unwrap()).unwrap();
    for obj in &scene.objects {
        let order = closure_order(&scene, &BTreeSet::from([obj.id])).unwrap();
        let listed: Vec<u32> =
            serde_json::from_value(closures[obj.id.to_string()]["closure"].clone()).unwrap();
        assert_eq!(listed, order);
        let gt = Image::load_png(a.join("gt").join(format!("{}.png", obj.id))).unwrap();
        assert_eq!(gt, render(&scene, &order.iter().copied().collect()));
    }
}

#[test]
fn single_object_closure_is_itself() {
    let dir = tempfile::tempdir().unwrap();
    let world = oracle_world(dir.path(), "1", "1");
    let closures: serde_json::Value =
        serde_json::from_slice(&std::fs::read(world.join("closures.json")).unwrap()).unwrap();
    let map = closures.as_object().unwrap();
    assert_eq!(map.len(), 1);
    let (id, entry) = map.iter().next().unwrap();
    assert_eq!(
        entry["closure"],
        serde_json::json!([id.parse::<u32>().unwrap()])
    );
}

#[test]
fn record_then_replay_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let world = oracle_world(dir.path(), "12", "5");
    let manifest = world.join("manifest.jsonl");
    let rec = dir.path().join("rec");
    assert_eq!(
        cli(&["record", "--manifest", p(&manifest), "--out", p(&rec)]),
        0
    );
    let fixtures = rec.join("fixtures.jsonl");

    let text = std::fs::read_to_string(&fixtures).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let store = FixtureStore::replay_from(&fixtures).unwrap();
    let keys: BTreeSet<String> = store.entries().into_iter().map(|e| e.key_hash).collect();
    assert_eq!(lines.len(), keys.len());
    assert_eq!(lines.len(), store.len());

    let r1 = dir.path().join("r1");
    let r2 = dir.path().join("r2");
    for out in [&r1, &r2] {
        let code = cli(&[
            "bench",
            "--manifest",
            p(&manifest),
            "--fixtures",
            p(&fixtures),
            "--out",
            p(out),
        ]);
        assert_eq!(code, 0);
    }
    assert_eq!(snapshot(&r1), snapshot(&r2));

    let live = dir.path().join("live");
    assert_eq!(
        cli(&["bench", "--manifest", p(&manifest), "--out", p(&live)]),
        0
    );
    let replayed = Report::load(r1.join("report.json")).unwrap();
    let direct = Report::load(live.join("report.json")).unwrap();
    let digests = |r: &Report| {
        r.entries
            .iter()
            .map(|e| e.final_digest.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(digests(&replayed), digests(&direct));
}

#[test]
fn replay_with_missing_fixture_fails_the_entry() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_three_entry_batch(dir.path());
    let world = oracle_world(dir.path(), "3", "3");
    let rec = dir.path().join("rec");
    assert_eq!(
        cli(&[
            "record",
            "--manifest",
            p(&world.join("manifest.jsonl")),
            "--out",
            p(&rec)
        ]),
        0
    );
    let out = dir.path().join("out");
    let code = cli(&[
        "bench",
        "--manifest",
        p(&manifest),
        "--fixtures",
        p(&rec.join("fixtures.jsonl")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 1);
    let report = Report::load(out.join("report.json")).unwrap();
    assert_eq!(report.counts.failed, 3);
    assert!(report.entries.iter().all(|e| e.error.is_some()));
}
