//! Candidate ranking for a (user, anchor-purchase) pair.
//!
//! Candidates come from the complementarity tables; each is scored by the
//! mixture model. The context assignment distribution is computed once per
//! pair, from the user slots plus the anchor's product slots, and reused
//! across candidates; only the prediction vector varies per candidate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSources;
use crate::mixture::MixtureParams;

/// Candidate filtering thresholds.
#[derive(Debug, Clone, Copy)]
pub struct SelectionConfig {
    pub min_s: f64,
    pub max_q: f64,
    /// Cap on candidates considered per anchor before ranking.
    pub max_candidates: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            min_s: 0.0,
            max_q: 0.1,
            max_candidates: 100,
        }
    }
}

/// One ranked candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate {
    pub item_id: String,
    pub predicted_open_rate: f64,
    pub complementarity: f64,
    /// 1-based position after sorting.
    pub rank: usize,
}

/// Ranked candidates plus the cold-start flag for the user.
#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub candidates: Vec<RankedCandidate>,
    pub cold_start: bool,
}

fn check_schema(params: &MixtureParams, sources: &FeatureSources) -> Result<()> {
    if !params.schema_hash.is_empty() {
        let hash = sources.schema.hash();
        if params.schema_hash != hash {
            return Err(Error::SchemaMismatch {
                model: params.schema_hash.clone(),
                input: hash,
            });
        }
    }
    Ok(())
}

/// Rank complement candidates for one user and anchor purchase. Cold users
/// are ranked with zeroed user slots and flagged; an anchor with no stored
/// candidates yields an empty list.
pub fn rank(
    user_id: &str,
    anchor_item_id: &str,
    params: &MixtureParams,
    sources: &FeatureSources,
    selection: &SelectionConfig,
    top_n: usize,
) -> Result<RankOutcome> {
    check_schema(params, sources)?;
    let cold_start = !sources.profiles.contains_key(user_id);
    let pairs = sources.product_scores.select_candidates(
        anchor_item_id,
        selection.min_s,
        selection.max_q,
        selection.max_candidates,
    )?;
    if pairs.is_empty() {
        return Ok(RankOutcome {
            candidates: Vec::new(),
            cold_start,
        });
    }
    // shared assignment distribution from the anchor's product slots
    let assign = match sources.assemble_vectors(user_id, anchor_item_id, anchor_item_id, true)? {
        Ok((x_hat, _, _)) => params.assignment_probs(&x_hat)?,
        Err(reason) => {
            return Err(Error::invalid(format!(
                "cannot assemble features for anchor {anchor_item_id}: {reason}"
            )))
        }
    };
    let mut scored = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let Ok((_, x, _)) =
            sources.assemble_vectors(user_id, anchor_item_id, &pair.candidate, true)?
        else {
            continue; // candidate vanished from the sources; skip it
        };
        let rate = params.predict_with_assignment(&assign, &x)?;
        scored.push(RankedCandidate {
            item_id: pair.candidate.clone(),
            predicted_open_rate: rate,
            complementarity: pair.complementarity,
            rank: 0,
        });
    }
    scored.sort_by(|a, b| {
        b.predicted_open_rate
            .partial_cmp(&a.predicted_open_rate)
            .expect("rates are finite")
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    scored.truncate(top_n);
    for (i, c) in scored.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    Ok(RankOutcome {
        candidates: scored,
        cold_start,
    })
}

/// One (user, anchor) request line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRequest {
    pub user_id: String,
    pub anchor_item_id: String,
}

/// One emitted ranking line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankRecord {
    pub user_id: String,
    pub anchor_item_id: String,
    pub pushed_item_id: String,
    pub predicted_open_rate: f64,
    pub s: f64,
    pub rank: usize,
    pub cold_start: bool,
}

/// Per-pair failure, reported but not fatal.
#[derive(Debug, Clone)]
pub struct PairError {
    pub index: usize,
    pub message: String,
}

/// Apply [`rank`] to each pair in order. Failures are isolated per pair.
/// `max_per_user` caps the number of emitted lines per user.
pub fn batch_rank(
    pairs: &[PairRequest],
    params: &MixtureParams,
    sources: &FeatureSources,
    selection: &SelectionConfig,
    top_n: usize,
    max_per_user: Option<usize>,
) -> Result<(Vec<RankRecord>, Vec<PairError>)> {
    check_schema(params, sources)?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut per_user: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for (index, pair) in pairs.iter().enumerate() {
        let emitted = per_user.entry(pair.user_id.as_str()).or_default();
        if let Some(cap) = max_per_user {
            if *emitted >= cap {
                continue;
            }
        }
        match rank(
            &pair.user_id,
            &pair.anchor_item_id,
            params,
            sources,
            selection,
            top_n,
        ) {
            Ok(outcome) => {
                for c in outcome.candidates {
                    if let Some(cap) = max_per_user {
                        if *emitted >= cap {
                            break;
                        }
                    }
                    records.push(RankRecord {
                        user_id: pair.user_id.clone(),
                        anchor_item_id: pair.anchor_item_id.clone(),
                        pushed_item_id: c.item_id,
                        predicted_open_rate: c.predicted_open_rate,
                        s: c.complementarity,
                        rank: c.rank,
                        cold_start: outcome.cold_start,
                    });
                    *emitted += 1;
                }
            }
            Err(e) => errors.push(PairError {
                index,
                message: e.to_string(),
            }),
        }
    }
    Ok((records, errors))
}
