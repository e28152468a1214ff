use std::time::Instant;

use spancl::corpus::{build_triples, pair_dataset_negatives};
use spancl::synth::{generate, SynthConfig};
use spancl::textproc::Vocab;
use spancl::training::{train, TrainConfig};

fn main() {
    let t0 = Instant::now();
    let world = generate(&SynthConfig::default()).unwrap();
    let augmenter = world.augmenter(101).unwrap();
    let pairing = pair_dataset_negatives(&world.train);
    let build = build_triples(&world.train, &augmenter, &pairing);
    println!(
        "triples {} skipped {} sources {:?} ({:.1?})",
        build.triples.len(),
        build.skipped(),
        build.source_counts,
        t0.elapsed()
    );
    let vocab = Vocab::build(
        world
            .train
            .passages
            .iter()
            .map(|p| p.text.as_str())
            .chain(world.train.question_texts()),
        2,
    );
    println!("vocab {}", vocab.len());

    let base_cfg = TrainConfig {
        epochs: 5,
        batch_size: 16,
        learning_rate: 3e-4,
        hidden_size: 32,
        layers: 2,
        heads: 4,
        max_seq_len: 64,
        max_query_len: 24,
        doc_stride: 32,
        max_answer_len: 8,
        ..TrainConfig::toy()
    };

    for (tau, lambda2) in [(0.3f64, 0.5f64), (1.0, 0.5), (0.05, 0.1), (1.0, 0.0)] {
        for seed in [1u64, 2] {
            let t = Instant::now();
            let mut cfg = base_cfg.clone();
            cfg.seed = seed;
            cfg.learning_rate = 2e-3;
            cfg.batch_size = 16;
            cfg.weights.tau = tau;
            cfg.weights.lambda2 = lambda2;
            let out = train(&world.train, &build.triples, Some(&world.dev), &vocab, &cfg).unwrap();
            let margins: Vec<f64> = out.log.epochs.iter().map(|e| e.probe_margin).collect();
            let last = out.reports.last().unwrap();
            println!(
                "tau {tau} λ2 {lambda2} seed {seed}: margins {:?}",
                margins.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>()
            );
            println!(
                "  EM {:.2} F1 {:.2} HasAns {:.2} NoAns {:.2}  best_epoch {:?}  ({:.1?})",
                last.exact, last.f1, last.has_ans_exact, last.no_ans_exact, out.best_epoch, t.elapsed()
            );
            for r in &out.reports {
                print!("  [{:.1}/{:.1}]", r.has_ans_exact, r.no_ans_exact);
            }
            println!();
        }
    }
    println!("total {:.1?}", t0.elapsed());
}
