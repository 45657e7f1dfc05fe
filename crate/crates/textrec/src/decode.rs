//! Catalog-constrained generation: beam search over a token trie built from
//! every catalog title, so each decoded sequence is a valid item name by
//! construction.
//!
//! Termination competes with continuation as a virtual token scored by the
//! end-marker logit, so a title that is a prefix of another ("A" vs "AB") is
//! handled probabilistically. Finished beams are ranked by mean per-token
//! log-probability (title tokens plus the termination step), which removes
//! the bias toward short titles; ties break on raw log-probability, then on
//! item id.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical_json_line;
use crate::error::{Error, Result};
use crate::ingest::{Catalog, SplitExample};
use crate::model::{forward, log_softmax_row, next_token_log_probs, ModelConfig, ParamSet, Scalar};
use crate::prompt::{default_template_bank, format_example, render_for_inference};
use crate::tokenizer::{TokenizerModel, EOS_ID};

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<u32, usize>,
    /// Resolved item id when a title ends here.
    terminal: Option<String>,
}

/// Prefix tree over `encode(title)` for every catalog title.
#[derive(Debug, Clone)]
pub struct TitleTrie {
    nodes: Vec<TrieNode>,
    max_depth: usize,
    num_terminals: usize,
}

impl TitleTrie {
    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Number of distinct titles (after duplicate-title resolution).
    pub fn num_titles(&self) -> usize {
        self.num_terminals
    }

    /// Walk every root-to-terminal path: `(token path, item id)`.
    pub fn walk_terminals(&self) -> Vec<(Vec<u32>, String)> {
        let mut out = Vec::new();
        let mut stack: Vec<(usize, Vec<u32>)> = vec![(0, Vec::new())];
        while let Some((node_idx, path)) = stack.pop() {
            let node = &self.nodes[node_idx];
            if let Some(item_id) = &node.terminal {
                out.push((path.clone(), item_id.clone()));
            }
            for (&tok, &child) in node.children.iter().rev() {
                let mut next = path.clone();
                next.push(tok);
                stack.push((child, next));
            }
        }
        out
    }
}

/// Build the trie over every catalog title. Item ids sharing an identical
/// normalized title resolve to the most popular id in `popularity` (training
/// interaction counts), ties broken by the lexicographically smaller id.
pub fn build_trie(
    catalog: &Catalog,
    tokenizer: &TokenizerModel,
    popularity: &BTreeMap<String, u64>,
) -> Result<TitleTrie> {
    if catalog.is_empty() {
        return Err(Error::data("build_trie: empty catalog"));
    }
    // title -> resolved id; catalog iteration is id-ascending, so the first
    // id with the maximal count wins ties.
    let mut resolved: BTreeMap<&str, (&str, u64)> = BTreeMap::new();
    for (item_id, title) in catalog.iter() {
        let count = popularity.get(item_id).copied().unwrap_or(0);
        match resolved.get_mut(title) {
            None => {
                resolved.insert(title, (item_id, count));
            }
            Some(best) => {
                if count > best.1 {
                    *best = (item_id, count);
                }
            }
        }
    }

    let mut trie = TitleTrie {
        nodes: vec![TrieNode::default()],
        max_depth: 0,
        num_terminals: 0,
    };
    for (title, (item_id, _)) in resolved {
        let path = tokenizer.encode(title, false, false)?;
        if path.is_empty() {
            return Err(Error::data(format!(
                "title for item '{item_id}' encodes to no tokens"
            )));
        }
        let mut node = 0usize;
        for &tok in &path {
            let next = match trie.nodes[node].children.get(&tok) {
                Some(&child) => child,
                None => {
                    trie.nodes.push(TrieNode::default());
                    let child = trie.nodes.len() - 1;
                    trie.nodes[node].children.insert(tok, child);
                    child
                }
            };
            node = next;
        }
        trie.nodes[node].terminal = Some(item_id.to_string());
        trie.num_terminals += 1;
        trie.max_depth = trie.max_depth.max(path.len());
    }
    Ok(trie)
}

/// Token ids that may extend `path`, plus whether the path may terminate
/// (it spells a complete title). Errors on a path that is not a trie prefix.
pub fn allowed_next(trie: &TitleTrie, path: &[u32]) -> Result<(Vec<u32>, bool)> {
    let mut node = 0usize;
    for &tok in path {
        node = *trie.nodes[node]
            .children
            .get(&tok)
            .ok_or_else(|| Error::data(format!("path is not a valid title prefix at token {tok}")))?;
    }
    let n = &trie.nodes[node];
    Ok((n.children.keys().copied().collect(), n.terminal.is_some()))
}

/// Top-k items with their length-normalized log-probability scores,
/// non-increasing, item ids distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub entries: Vec<(String, f64)>,
}

struct Beam {
    node: usize,
    path: Vec<u32>,
    cum: f64,
}

#[derive(Debug, Clone)]
struct FinishedBeam {
    item_id: String,
    raw: f64,
    normalized: f64,
}

fn rank_finished(mut finished: Vec<FinishedBeam>, k: usize) -> RankedList {
    finished.sort_by(|a, b| {
        b.normalized
            .total_cmp(&a.normalized)
            .then_with(|| b.raw.total_cmp(&a.raw))
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    let mut entries = Vec::with_capacity(k);
    let mut seen = std::collections::HashSet::new();
    for f in finished {
        if entries.len() == k {
            break;
        }
        if seen.insert(f.item_id.clone()) {
            entries.push((f.item_id, f.normalized));
        }
    }
    RankedList { entries }
}

/// Beam search constrained to the title trie. Beams expand only over trie
/// children; a beam finishes by choosing termination at a terminal node,
/// scored with the end-marker logit. Requires `beam_width >= k` and a prompt
/// short enough that prompt + deepest title + end marker fit in `max_len`.
pub fn recommend_topk<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    tokenizer: &TokenizerModel,
    trie: &TitleTrie,
    prompt_text: &str,
    k: usize,
    beam_width: usize,
) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::config("recommend: k must be at least 1"));
    }
    if beam_width < k {
        return Err(Error::config(format!(
            "recommend: beam_width ({beam_width}) must be at least k ({k})"
        )));
    }
    let prompt_ids = tokenizer.encode(prompt_text, true, false)?;
    if prompt_ids.len() + trie.max_depth + 1 > cfg.max_len {
        return Err(Error::data(format!(
            "prompt of {} tokens leaves no room for a title of up to {} tokens within max_len {}",
            prompt_ids.len(),
            trie.max_depth,
            cfg.max_len
        )));
    }

    let mut live = vec![Beam {
        node: 0,
        path: Vec::new(),
        cum: 0.0,
    }];
    let mut finished: Vec<FinishedBeam> = Vec::new();
    for _depth in 0..=trie.max_depth {
        if live.is_empty() {
            break;
        }
        // All live beams share one path length, so the batch is rectangular.
        let seq = prompt_ids.len() + live[0].path.len();
        let mut ids = Array2::<u32>::zeros((live.len(), seq));
        for (row, beam) in live.iter().enumerate() {
            for (col, &id) in prompt_ids.iter().chain(beam.path.iter()).enumerate() {
                ids[[row, col]] = id;
            }
        }
        let lens = vec![seq; live.len()];
        let logp = next_token_log_probs(params, cfg, &ids, &lens)?;

        let mut candidates: Vec<Beam> = Vec::new();
        for (row, beam) in live.iter().enumerate() {
            let node = &trie.nodes[beam.node];
            if node.terminal.is_some() {
                let raw = beam.cum + logp[[row, EOS_ID as usize]].to_f64().unwrap();
                let len = beam.path.len() + 1;
                finished.push(FinishedBeam {
                    item_id: node.terminal.clone().unwrap(),
                    raw,
                    normalized: raw / len as f64,
                });
            }
            for (&tok, &child) in &node.children {
                let mut path = beam.path.clone();
                path.push(tok);
                candidates.push(Beam {
                    node: child,
                    path,
                    cum: beam.cum + logp[[row, tok as usize]].to_f64().unwrap(),
                });
            }
        }
        candidates.sort_by(|a, b| b.cum.total_cmp(&a.cum).then_with(|| a.path.cmp(&b.path)));
        candidates.truncate(beam_width);
        live = candidates;
    }

    if finished.len() < k {
        log::warn!(
            "beam search finished only {} of the requested {k} candidates; widen beam_width",
            finished.len()
        );
    }
    Ok(rank_finished(finished, k))
}

/// Length-normalized log-probability of one catalog title given the prompt:
/// the mean over the title's next-token log-probabilities plus the
/// termination step. The exhaustive counterpart of [`recommend_topk`].
pub fn score_title<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    tokenizer: &TokenizerModel,
    catalog: &Catalog,
    prompt_text: &str,
    title: &str,
) -> Result<f64> {
    score_title_parts(params, cfg, tokenizer, catalog, prompt_text, title).map(|(n, _)| n)
}

/// [`score_title`] exposing `(normalized, raw)` for exact tie-breaking.
pub fn score_title_parts<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    tokenizer: &TokenizerModel,
    catalog: &Catalog,
    prompt_text: &str,
    title: &str,
) -> Result<(f64, f64)> {
    if !catalog.iter().any(|(_, t)| t == title) {
        return Err(Error::data(format!("unknown title '{title}'")));
    }
    let prompt_ids = tokenizer.encode(prompt_text, true, false)?;
    let title_ids = tokenizer.encode(title, false, false)?;
    let seq = prompt_ids.len() + title_ids.len();
    if seq > cfg.max_len {
        return Err(Error::data(format!(
            "prompt plus title is {seq} tokens, over max_len {}",
            cfg.max_len
        )));
    }
    let mut ids = Array2::<u32>::zeros((1, seq));
    for (col, &id) in prompt_ids.iter().chain(title_ids.iter()).enumerate() {
        ids[[0, col]] = id;
    }
    let logits = forward(params, cfg, &ids)?;
    let mut raw = 0.0f64;
    for (j, &tok) in title_ids.iter().enumerate() {
        let row = logits.slice(ndarray::s![0, prompt_ids.len() + j - 1, ..]);
        let logp = log_softmax_row(&row);
        raw += logp[tok as usize].to_f64().unwrap();
    }
    let last = logits.slice(ndarray::s![0, seq - 1, ..]);
    raw += log_softmax_row(&last)[EOS_ID as usize].to_f64().unwrap();
    let normalized = raw / (title_ids.len() + 1) as f64;
    Ok((normalized, raw))
}

/// Render the evaluation prompt for one test example: template 0, oldest
/// history dropped until the prompt leaves room for the deepest title plus
/// the end marker.
pub fn build_eval_prompt(
    example: &SplitExample,
    catalog: &Catalog,
    tokenizer: &TokenizerModel,
    cfg: &ModelConfig,
    trie: &TitleTrie,
) -> Result<String> {
    let bank = default_template_bank();
    let template = &bank[0];
    let reserve = trie.max_depth + 1;
    for start in 0..example.history.len() {
        let kept = &example.history[start..];
        let formatted =
            format_example(kept, &example.target, catalog, template, &example.user_id)?;
        let text = render_for_inference(&formatted);
        let tokens = tokenizer.encode(&text, true, false)?;
        if tokens.len() + reserve <= cfg.max_len {
            return Ok(text);
        }
    }
    Err(Error::data(format!(
        "user '{}': prompt cannot fit within max_len {} next to the longest title",
        example.user_id, cfg.max_len
    )))
}

/// Recommend for many users in parallel; order follows the input.
pub fn recommend_for_users<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    tokenizer: &TokenizerModel,
    trie: &TitleTrie,
    prompts: &[(String, String)],
    k: usize,
    beam_width: usize,
) -> Result<Vec<(String, RankedList)>> {
    prompts
        .par_iter()
        .map(|(user_id, prompt)| {
            recommend_topk(params, cfg, tokenizer, trie, prompt, k, beam_width)
                .map(|list| (user_id.clone(), list))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Prediction file format, shared with the evaluate side so external
// baselines can be scored from the same JSON-lines layout.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PredictionItem {
    item_id: String,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    user_id: String,
    items: Vec<PredictionItem>,
}

pub fn write_predictions(path: &Path, predictions: &[(String, RankedList)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for (user_id, list) in predictions {
        let row = PredictionRow {
            user_id: user_id.clone(),
            items: list
                .entries
                .iter()
                .map(|(item_id, score)| PredictionItem {
                    item_id: item_id.clone(),
                    score: *score,
                })
                .collect(),
        };
        writeln!(out, "{}", canonical_json_line(&row)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, RankedList)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: PredictionRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: (idx + 1) as u64,
            msg: e.to_string(),
        })?;
        out.push((
            row.user_id,
            RankedList {
                entries: row.items.into_iter().map(|i| (i.item_id, i.score)).collect(),
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AdapterSite;
    use crate::tokenizer::train_tokenizer;

    fn base_tokenizer() -> TokenizerModel {
        // No merges: every byte is its own token.
        train_tokenizer(Vec::<String>::new(), crate::tokenizer::BASE_VOCAB).unwrap()
    }

    fn catalog_of(titles: &[(&str, &str)]) -> Catalog {
        let mut c = Catalog::new();
        for (id, title) in titles {
            c.insert(*id, title).unwrap();
        }
        c
    }

    fn no_popularity() -> BTreeMap<String, u64> {
        BTreeMap::new()
    }

    #[test]
    fn prefix_titles_share_a_path() {
        let tokenizer = base_tokenizer();
        let catalog = catalog_of(&[("1", "A"), ("2", "AB")]);
        let trie = build_trie(&catalog, &tokenizer, &no_popularity()).unwrap();
        let a_path = tokenizer.encode("A", false, false).unwrap();
        let (children, terminal) = allowed_next(&trie, &a_path).unwrap();
        assert!(terminal, "'A' should be a terminal");
        assert_eq!(children.len(), 1, "'AB' continues from 'A'");
        let ab_path = tokenizer.encode("AB", false, false).unwrap();
        let (children, terminal) = allowed_next(&trie, &ab_path).unwrap();
        assert!(terminal);
        assert!(children.is_empty());
    }

    #[test]
    fn single_title_catalog_has_one_terminal() {
        let tokenizer = base_tokenizer();
        let catalog = catalog_of(&[("only", "Sole Item")]);
        let trie = build_trie(&catalog, &tokenizer, &no_popularity()).unwrap();
        assert_eq!(trie.num_titles(), 1);
        assert_eq!(trie.walk_terminals().len(), 1);
    }

    #[test]
    fn every_title_is_reachable_and_decodes_back() {
        let tokenizer = train_tokenizer(
            ["Aurora Station (1994)", "Paper Lanterns (1997)", "Night Ferry (2001)"],
            300,
        )
        .unwrap();
        let catalog = catalog_of(&[
            ("a", "Aurora Station (1994)"),
            ("b", "Paper Lanterns (1997)"),
            ("c", "Night Ferry (2001)"),
        ]);
        let trie = build_trie(&catalog, &tokenizer, &no_popularity()).unwrap();
        let mut titles: Vec<String> = trie
            .walk_terminals()
            .into_iter()
            .map(|(path, _)| tokenizer.decode(&path).unwrap())
            .collect();
        titles.sort();
        let mut expected: Vec<String> = catalog.iter().map(|(_, t)| t.to_string()).collect();
        expected.sort();
        assert_eq!(titles, expected);
    }

    #[test]
    fn empty_catalog_is_an_error() {
        let tokenizer = base_tokenizer();
        assert!(build_trie(&Catalog::new(), &tokenizer, &no_popularity()).is_err());
    }

    #[test]
    fn root_children_cover_all_first_tokens() {
        let tokenizer = base_tokenizer();
        let catalog = catalog_of(&[("1", "Ax"), ("2", "Bx"), ("3", "Ay")]);
        let trie = build_trie(&catalog, &tokenizer, &no_popularity()).unwrap();
        let (children, terminal) = allowed_next(&trie, &[]).unwrap();
        assert_eq!(children.len(), 2); // 'A' and 'B'
        assert!(!terminal);
    }

    #[test]
    fn invalid_prefix_is_an_error() {
        let tokenizer = base_tokenizer();
        let catalog = catalog_of(&[("1", "A")]);
        let trie = build_trie(&catalog, &tokenizer, &no_popularity()).unwrap();
        let z_path = tokenizer.encode("Z", false, false).unwrap();
        assert!(allowed_next(&trie, &z_path).is_err());
    }

    #[test]
    fn duplicate_titles_resolve_by_popularity_then_id() {
        let tokenizer = base_tokenizer();
        let catalog = catalog_of(&[("x9", "Same"), ("x2", "Same")]);
        // popularity favors x9
        let mut pop = BTreeMap::new();
        pop.insert("x9".to_string(), 5u64);
        pop.insert("x2".to_string(), 1u64);
        let trie = build_trie(&catalog, &tokenizer, &pop).unwrap();
        let terminals = trie.walk_terminals();
        assert_eq!(terminals.len(), 1);
        assert_eq!(terminals[0].1, "x9");
        // tie breaks to the lexicographically smaller id
        let trie = build_trie(&catalog, &tokenizer, &no_popularity()).unwrap();
        assert_eq!(trie.walk_terminals()[0].1, "x2");
    }

    fn tiny_model(vocab: usize, seed: u64) -> (ModelConfig, ParamSet<f32>) {
        let cfg = ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 96,
            dropout: 0.0,
            adapter_rank: 2,
            adapter_alpha: 4.0,
            adapter_targets: vec![AdapterSite::Q, AdapterSite::V],
        };
        let params = ParamSet::init(&cfg, seed).unwrap();
        (cfg, params)
    }

    const FIXTURE_TITLES: [(&str, &str); 5] = [
        ("m0", "Blue Door"),
        ("m1", "Blue Harbor"),
        ("m2", "Red Kite"),
        ("m3", "Stone Path"),
        ("m4", "Stone"),
    ];

    fn fixture() -> (Catalog, TokenizerModel, TitleTrie) {
        let catalog = catalog_of(&FIXTURE_TITLES);
        let corpus: Vec<String> = catalog.iter().map(|(_, t)| t.to_string()).collect();
        let tokenizer = train_tokenizer(&corpus, 280).unwrap();
        let trie = build_trie(&catalog, &tokenizer, &no_popularity()).unwrap();
        (catalog, tokenizer, trie)
    }

    #[test]
    fn single_item_catalog_always_recommends_it() {
        let tokenizer = base_tokenizer();
        let catalog = catalog_of(&[("only", "Sole Item")]);
        let trie = build_trie(&catalog, &tokenizer, &no_popularity()).unwrap();
        let (cfg, params) = tiny_model(tokenizer.vocab_size(), 1);
        let list = recommend_topk(&params, &cfg, &tokenizer, &trie, "### Response:\n", 1, 20)
            .unwrap();
        assert_eq!(list.entries.len(), 1);
        assert_eq!(list.entries[0].0, "only");
    }

    #[test]
    fn resolved_duplicates_never_both_appear() {
        let tokenizer = base_tokenizer();
        let catalog = catalog_of(&[("a1", "Twin"), ("a2", "Twin"), ("b", "Other")]);
        let trie = build_trie(&catalog, &tokenizer, &no_popularity()).unwrap();
        let (cfg, params) = tiny_model(tokenizer.vocab_size(), 2);
        let list =
            recommend_topk(&params, &cfg, &tokenizer, &trie, "### Response:\n", 2, 20).unwrap();
        let has_a1 = list.entries.iter().any(|(id, _)| id == "a1");
        let has_a2 = list.entries.iter().any(|(id, _)| id == "a2");
        assert!(!(has_a1 && has_a2), "both duplicate ids surfaced: {list:?}");
    }

    /// Exhaustive oracle: score every title, rank by (normalized, raw, id).
    fn exhaustive_ranking(
        params: &ParamSet<f32>,
        cfg: &ModelConfig,
        tokenizer: &TokenizerModel,
        catalog: &Catalog,
        trie: &TitleTrie,
        prompt: &str,
    ) -> Vec<(String, f64)> {
        let mut scored: Vec<(String, f64, f64)> = trie
            .walk_terminals()
            .into_iter()
            .map(|(path, item_id)| {
                let title = tokenizer.decode(&path).unwrap();
                let (normalized, raw) =
                    score_title_parts(params, cfg, tokenizer, catalog, prompt, &title).unwrap();
                (item_id, normalized, raw)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| b.2.total_cmp(&a.2))
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.into_iter().map(|(id, n, _)| (id, n)).collect()
    }

    #[test]
    fn wide_beam_matches_exhaustive_scoring_exactly() {
        let (catalog, tokenizer, trie) = fixture();
        let prompt = "### Instruction:\nPick the next item.\n### Input:\nBlue Door\n### Response:\n";
        for seed in 0..8u64 {
            let (cfg, params) = tiny_model(tokenizer.vocab_size(), seed);
            let beam =
                recommend_topk(&params, &cfg, &tokenizer, &trie, prompt, 5, trie.num_titles())
                    .unwrap();
            let oracle = exhaustive_ranking(&params, &cfg, &tokenizer, &catalog, &trie, prompt);
            assert_eq!(beam.entries.len(), oracle.len());
            for ((beam_id, beam_score), (oracle_id, oracle_score)) in
                beam.entries.iter().zip(oracle.iter())
            {
                assert_eq!(beam_id, oracle_id, "seed {seed}: order differs");
                assert_eq!(beam_score, oracle_score, "seed {seed}: score differs");
            }
        }
    }

    #[test]
    fn argmax_title_equals_beam_rank_one() {
        let (catalog, tokenizer, trie) = fixture();
        let prompt = "### Response:\n";
        let (cfg, params) = tiny_model(tokenizer.vocab_size(), 33);
        let oracle = exhaustive_ranking(&params, &cfg, &tokenizer, &catalog, &trie, prompt);
        let beam = recommend_topk(&params, &cfg, &tokenizer, &trie, prompt, 1, 20).unwrap();
        assert_eq!(beam.entries[0].0, oracle[0].0);
    }

    #[test]
    fn scores_are_log_probabilities() {
        let (catalog, tokenizer, _) = fixture();
        let (cfg, params) = tiny_model(tokenizer.vocab_size(), 4);
        let (normalized, raw) = score_title_parts(
            &params, &cfg, &tokenizer, &catalog, "### Response:\n", "Blue Door",
        )
        .unwrap();
        assert!(normalized <= 0.0, "normalized {normalized}");
        assert!(raw <= 0.0, "raw {raw}"); // exp(raw) <= 1
    }

    #[test]
    fn unknown_title_is_an_error() {
        let (catalog, tokenizer, _) = fixture();
        let (cfg, params) = tiny_model(tokenizer.vocab_size(), 4);
        let err = score_title(&params, &cfg, &tokenizer, &catalog, "x", "Missing Title")
            .unwrap_err();
        assert!(err.to_string().contains("Missing Title"));
    }

    #[test]
    fn widening_the_beam_never_hurts_the_top_score() {
        let (_, tokenizer, trie) = fixture();
        let prompt = "### Instruction:\nNext?\n### Input:\nStone\n### Response:\n";
        for seed in [7u64, 8, 9] {
            let (cfg, params) = tiny_model(tokenizer.vocab_size(), seed);
            let mut prev = f64::NEG_INFINITY;
            for width in [1usize, 2, 3, 5, 10] {
                let list =
                    recommend_topk(&params, &cfg, &tokenizer, &trie, prompt, 1, width).unwrap();
                let top = list.entries[0].1;
                assert!(
                    top >= prev,
                    "seed {seed}: width {width} top score {top} < previous {prev}"
                );
                prev = top;
            }
        }
    }

    #[test]
    fn recommendations_are_valid_and_distinct() {
        let (_, tokenizer, trie) = fixture();
        let catalog_ids: std::collections::HashSet<&str> =
            FIXTURE_TITLES.iter().map(|(id, _)| *id).collect();
        for seed in 0..10u64 {
            let (cfg, params) = tiny_model(tokenizer.vocab_size(), 100 + seed);
            let prompt = format!("### Input:\nprobe {seed}\n### Response:\n");
            let list = recommend_topk(&params, &cfg, &tokenizer, &trie, &prompt, 3, 10).unwrap();
            let mut seen = std::collections::HashSet::new();
            for (id, score) in &list.entries {
                assert!(catalog_ids.contains(id.as_str()), "invalid id {id}");
                assert!(seen.insert(id.clone()), "duplicate id {id}");
                assert!(score.is_finite());
            }
            for pair in list.entries.windows(2) {
                assert!(pair[0].1 >= pair[1].1, "scores not sorted");
            }
        }
    }

    #[test]
    fn beam_width_below_k_is_rejected() {
        let (_, tokenizer, trie) = fixture();
        let (cfg, params) = tiny_model(tokenizer.vocab_size(), 1);
        assert!(recommend_topk(&params, &cfg, &tokenizer, &trie, "x", 5, 3).is_err());
    }

    #[test]
    fn over_long_prompt_is_rejected() {
        let (_, tokenizer, trie) = fixture();
        let (cfg, params) = tiny_model(tokenizer.vocab_size(), 1);
        let long_prompt = "word ".repeat(cfg.max_len);
        let err =
            recommend_topk(&params, &cfg, &tokenizer, &trie, &long_prompt, 1, 5).unwrap_err();
        assert!(err.to_string().contains("max_len") || err.to_string().contains("room"));
    }

    #[test]
    fn prediction_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.jsonl");
        let preds = vec![
            (
                "u1".to_string(),
                RankedList {
                    entries: vec![("m1".to_string(), -0.5), ("m2".to_string(), -1.25)],
                },
            ),
            (
                "u2".to_string(),
                RankedList {
                    entries: vec![("m3".to_string(), -0.125)],
                },
            ),
        ];
        write_predictions(&path, &preds).unwrap();
        let loaded = read_predictions(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "u1");
        assert_eq!(loaded[0].1, preds[0].1);
        assert_eq!(loaded[1].1, preds[1].1);
        // keys are sorted for byte-stable diffs
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"items\":"));
    }
}
