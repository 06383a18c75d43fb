//! Measures how well a trained checkpoint separates each pair of classes.
//!
//! The detector is class-agnostic — prototypes are built from support crops
//! at evaluation time — so a checkpoint can be scored on classes it never
//! saw during training, including ones absent from its manifest. For every
//! unordered pair in the given list this builds a dataset whose held-out
//! split is exactly that pair, then reports two-way episode AP50.
//!
//! ```sh
//! cargo run -p protodet --example pairprobe -- \
//!     runs/train/checkpoint_final.json triad_main,triad_anti,zig_z,zig_s
//! ```

use protodet::episodic::TrainConfig;
use protodet::eval::{evaluate, EvalParams};
use protodet::model::Model;
use protodet::toydata::{Split, ToyDataset};

fn main() {
    let mut args = std::env::args().skip(1);
    let (path, list) = match (args.next(), args.next()) {
        (Some(p), Some(l)) => (p, l),
        _ => {
            eprintln!("usage: pairprobe <checkpoint.json> <class,class,...>");
            std::process::exit(2);
        }
    };
    let names: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();

    let (model, extra) = Model::load(path.as_ref()).expect("load checkpoint");
    let cfg: TrainConfig = serde_json::from_value(
        extra.get("config").cloned().expect("checkpoint embeds its training config"),
    )
    .expect("parse embedded config");
    let hyper = cfg.hyper();

    // Extend the checkpoint's inventory with any names it has not seen.
    let mut classes = cfg.dataset.classes.clone();
    for n in &names {
        if !classes.contains(n) {
            classes.push(n.clone());
        }
    }
    let idx_of = |n: &str| classes.iter().position(|c| c == n).expect("known class");

    let mut rows = Vec::new();
    for i in 0..names.len() {
        for j in (i + 1)..names.len() {
            let mut params = cfg.dataset.clone();
            params.classes = classes.clone();
            params.novel_classes = vec![idx_of(&names[i]), idx_of(&names[j])];
            params.base_classes =
                (0..classes.len()).filter(|k| !params.novel_classes.contains(k)).collect();
            let dataset = ToyDataset::new(params).expect("dataset");
            let ep = EvalParams {
                split: Split::Novel,
                way: 3,
                shot: cfg.shot,
                n_query: cfg.n_query,
                episodes: 30,
                base_seed: 0,
                groups: 1,
                score_threshold: 0.0,
                nms_iou: 0.5,
                hyper: hyper.clone(),
            };
            let r = evaluate(&model, &dataset, &ep).expect("evaluate");
            println!("{:12} vs {:12}  ap50 {:.4}", names[i], names[j], r.ap50.mean);
            rows.push(r.ap50.mean);
        }
    }
    if rows.len() > 1 {
        println!("pair mean: {:.4}", rows.iter().sum::<f64>() / rows.len() as f64);
    }
}
