//! Scoring a split against per-category galleries.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dataset::{PooledImages, PreparedQuery};
use crate::error::{contract, Result};
use crate::experts::RawExperts;
use crate::model::{Ccnet, EmbeddedImages, QueryScores};
use crate::retrieval::{
    combined_probability, ensemble_combine_log, single_probability, QueryOutcome, RankedList,
    RecallReport,
};

/// Which probability a model contributes to the ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    /// `p^r · p^c`.
    Ccnet,
    /// `p^r` only.
    Composition,
    /// `p^c` only.
    Correction,
}

impl Scoring {
    pub fn rank(self, s: &QueryScores) -> Result<RankedList> {
        match self {
            Scoring::Ccnet => combined_probability(&s.composition, &s.correction),
            Scoring::Composition => single_probability(&s.composition),
            Scoring::Correction => single_probability(&s.correction),
        }
    }
}

struct Gallery {
    positions: Vec<usize>,
    /// Per model.
    embedded: Vec<EmbeddedImages>,
}

/// Scores queries for one or more models against category galleries.
/// Immutable once built, so queries may be scored from several threads.
pub struct Evaluator<'a> {
    models: Vec<&'a Ccnet>,
    queries: &'a [PreparedQuery],
    /// Per model, every image of the store.
    images: Vec<EmbeddedImages>,
    galleries: BTreeMap<String, Gallery>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        models: &[&'a Ccnet],
        pooled: &PooledImages,
        queries: &'a [PreparedQuery],
        galleries: &BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(contract("evaluation needs at least one model"));
        }
        let all: Vec<&RawExperts> = pooled.raws.iter().collect();
        let images: Vec<EmbeddedImages> = models
            .iter()
            .map(|m| m.embed_images(&all))
            .collect::<Result<_>>()?;
        let mut gs = BTreeMap::new();
        for (cat, positions) in galleries {
            let embedded = images
                .iter()
                .map(|im| im.select(positions))
                .collect::<Result<_>>()?;
            gs.insert(
                cat.clone(),
                Gallery {
                    positions: positions.clone(),
                    embedded,
                },
            );
        }
        Ok(Self {
            models: models.to_vec(),
            queries,
            images,
            galleries: gs,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    /// Raw scores of query `qi` for every model, plus the ground truth's
    /// gallery position.
    pub fn score(&self, qi: usize) -> Result<ScoredQuery> {
        let q = &self.queries[qi];
        let g = self
            .galleries
            .get(&q.category)
            .ok_or_else(|| contract(alloc::format!("no gallery for category `{}`", q.category)))?;
        let truth = g
            .positions
            .iter()
            .position(|&p| p == q.trg_pos)
            .ok_or_else(|| contract("ground truth absent from gallery"))?;
        let per_model = self
            .models
            .iter()
            .enumerate()
            .map(|(m, model)| {
                let reference = self.images[m].select(&[q.ref_pos])?;
                model.score_query(&reference, &q.words, &g.embedded[m])
            })
            .collect::<Result<_>>()?;
        Ok(ScoredQuery {
            category: q.category.clone(),
            truth,
            per_model,
        })
    }

    pub fn score_all(&self) -> Result<Vec<ScoredQuery>> {
        (0..self.queries.len()).map(|i| self.score(i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ScoredQuery {
    pub category: String,
    /// Gallery position of the ground truth.
    pub truth: usize,
    pub per_model: Vec<QueryScores>,
}

impl ScoredQuery {
    /// Ranking from the models in `members`, pooled geometrically.
    pub fn rank(&self, members: &[usize], scoring: Scoring) -> Result<RankedList> {
        if members.is_empty() {
            return Err(contract("no ensemble members"));
        }
        if let [m] = members {
            return scoring.rank(&self.per_model[*m]);
        }
        let logs = members
            .iter()
            .map(|&m| scoring.rank(&self.per_model[m]).map(|r| r.log_probabilities))
            .collect::<Result<Vec<_>>>()?;
        ensemble_combine_log(&logs)
    }

    pub fn outcome(&self, members: &[usize], scoring: Scoring) -> Result<QueryOutcome> {
        let r = self.rank(members, scoring)?;
        Ok(QueryOutcome {
            category: self.category.clone(),
            truth_rank: r.rank_of(self.truth).ok_or_else(|| contract("truth not ranked"))?,
        })
    }
}

/// Recall report for one model subset and scoring rule.
pub fn report(
    scored: &[ScoredQuery],
    members: &[usize],
    scoring: Scoring,
    ks: &[usize],
) -> Result<RecallReport> {
    let outcomes = scored
        .iter()
        .map(|s| s.outcome(members, scoring))
        .collect::<Result<Vec<_>>>()?;
    RecallReport::from_outcomes(&outcomes, ks)
}
