//! Temporary diagnostic; deleted before release.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use textrec::decode::{build_eval_prompt, build_trie, recommend_topk, score_title_parts};
use textrec::ingest::{build_sequences, parse_movielens, split_leave_one_out, train_popularity, ParseMode};
use textrec::model::ModelConfig;
use textrec::tokenizer::train_tokenizer;
use textrec::train::{fit_with_epoch_limit, load_params, TrainConfig};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

#[test]
fn debug_memorization() {
    let ratings = std::fs::File::open(fixtures().join("toy50/ratings.csv")).unwrap();
    let movies = std::fs::File::open(fixtures().join("toy50/movies.csv")).unwrap();
    let parsed = parse_movielens(ratings, movies, ParseMode::Strict).unwrap();
    let (sequences, _) = build_sequences(&parsed.interactions, 3).unwrap();
    let split = split_leave_one_out(&sequences).unwrap();
    println!("train {} valid {} test {}", split.train.len(), split.valid.len(), split.test.len());
    println!("example train: hist={:?} target={}", split.train[0].history, split.train[0].target);

    let corpus = textrec::train::prepare_corpus_texts(&split, &parsed.catalog, 9).unwrap();
    let tokenizer = train_tokenizer(&corpus, 512).unwrap();
    println!("tokenizer vocab {}", tokenizer.vocab_size());
    let model_cfg = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        max_len: 160,
        dropout: 0.0,
        adapter_rank: 0,
        adapter_alpha: 1.0,
        adapter_targets: vec![],
    };
    let train_cfg = TrainConfig {
        peak_lr: 2e-3,
        warmup_steps: 20,
        batch_size: 16,
        epochs: 100,
        seed: 9,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let outcome = fit_with_epoch_limit::<f32>(
        &split, &parsed.catalog, &tokenizer, &model_cfg, &train_cfg, dir.path(), false, Some(100),
    )
    .unwrap();
    let log = std::fs::read_to_string(&outcome.log_path).unwrap();
    for (i, line) in log.lines().enumerate() {
        if i % 40 == 0 || line.contains("\"epoch\":100") || line.contains("\"epoch\":50") {
            println!("{line}");
        }
    }
    let (_, params) = load_params::<f32>(&outcome.last_checkpoint).unwrap();
    let popularity = train_popularity(&sequences);
    let trie = build_trie(&parsed.catalog, &tokenizer, &popularity).unwrap();

    for example in split.valid.iter().take(5) {
        let prompt = build_eval_prompt(example, &parsed.catalog, &tokenizer, &model_cfg, &trie).unwrap();
        let rec = recommend_topk(&params, &model_cfg, &tokenizer, &trie, &prompt, 3, 20).unwrap();
        let target_title = parsed.catalog.get(&example.target).unwrap();
        println!(
            "user {} target {} ({}): got {:?}",
            example.user_id, example.target, target_title, rec.entries
        );
        let (n, r) = score_title_parts(&params, &model_cfg, &tokenizer, &parsed.catalog, &prompt, target_title).unwrap();
        println!("   target score: norm {n:.4} raw {r:.4}");
        // score all titles
        let mut all: Vec<(String, f64)> = parsed
            .catalog
            .iter()
            .map(|(id, t)| {
                let (n, _) = score_title_parts(&params, &model_cfg, &tokenizer, &parsed.catalog, &prompt, t).unwrap();
                (id.to_string(), n)
            })
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1));
        println!("   all: {:?}", &all[..4.min(all.len())]);
    }
    let _ = BTreeMap::<u8, u8>::new();
}
