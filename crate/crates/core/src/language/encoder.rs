use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    tokenize, CorpusEntry, DialogContext, Direction, EditingEncoding, RequestCorpus, RequestType,
};
use crate::backend::{NUM_ATTRIBUTES, NUM_DEGREES};
use crate::checkpoint::Checkpoint;
use crate::math::{argmax, softmax};
use crate::nn::{Adam, Embedding, Linear, LstmStack, NamedTensor, Params};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "encoder";
const PAD: &str = "<pad>";
const OOV: &str = "<unk>";
const NUM_TYPES: usize = 7;
const NUM_ATTR_CLASSES: usize = NUM_ATTRIBUTES + 1;
const NUM_DIRECTIONS: usize = 3;
/// None, six targets, then relative magnitudes -2, -1, +1, +2.
const NUM_DEGREE_CLASSES: usize = 1 + NUM_DEGREES + 4;
const RELATIVE: [i8; 4] = [-2, -1, 1, 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub holdout_fraction: f64,
    /// Minimum held-out accuracy of every head.
    pub accuracy_floor: f64,
    /// Request-type confidence below which a request parses as `other`.
    pub confidence_threshold: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            hidden: 1024,
            num_layers: 2,
            batch_size: 2048,
            learning_rate: 1e-3,
            epochs: 60,
            holdout_fraction: 0.1,
            accuracy_floor: 0.90,
            confidence_threshold: 0.5,
        }
    }
}

impl EncoderConfig {
    /// Small trunk that trains in about a minute on one core.
    pub fn compact() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            batch_size: 32,
            learning_rate: 3e-3,
            epochs: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.num_layers == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "encoder sizes must be positive".into(),
            ));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidArgument(
                "holdout_fraction must lie in (0, 1)".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Token table; index 0 pads, index 1 stands for unseen words.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let tokens = [PAD.to_string(), OOV.to_string()]
            .into_iter()
            .chain(words)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn oov_id(&self) -> usize {
        1
    }

    /// Token ids; unknown words map to the OOV id.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(1))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub request_type: f64,
    pub attribute: f64,
    pub direction: f64,
    pub degree: f64,
    /// Whole encoding correct after decoding.
    pub exact: f64,
}

impl HeadAccuracy {
    pub fn min_head(&self) -> f64 {
        self.request_type
            .min(self.attribute)
            .min(self.direction)
            .min(self.degree)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub schema_version: u32,
    pub seed: u64,
    pub config: EncoderConfig,
    pub vocabulary: Vec<String>,
    pub n_train: usize,
    pub n_holdout: usize,
    pub epoch_loss: Vec<f64>,
    pub accuracy: HeadAccuracy,
    pub per_context: BTreeMap<DialogContext, HeadAccuracy>,
}

#[derive(Debug, Clone, PartialEq)]
struct ContextHeads {
    request_type: Linear,
    attribute: Linear,
    direction: Linear,
    degree: Linear,
}

impl ContextHeads {
    fn new<R: rand::Rng>(hidden: usize, rng: &mut R) -> Self {
        let std = 1.0 / (hidden as f64).sqrt();
        Self {
            request_type: Linear::gaussian(hidden, NUM_TYPES, std, rng),
            attribute: Linear::gaussian(hidden, NUM_ATTR_CLASSES, std, rng),
            direction: Linear::gaussian(hidden, NUM_DIRECTIONS, std, rng),
            degree: Linear::gaussian(hidden, NUM_DEGREE_CLASSES, std, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.input_dim(), l.output_dim());
        Self {
            request_type: z(&self.request_type),
            attribute: z(&self.attribute),
            direction: z(&self.direction),
            degree: z(&self.degree),
        }
    }

    fn all(&self) -> [&Linear; 4] {
        [
            &self.request_type,
            &self.attribute,
            &self.direction,
            &self.degree,
        ]
    }

    fn all_mut(&mut self) -> [&mut Linear; 4] {
        [
            &mut self.request_type,
            &mut self.attribute,
            &mut self.direction,
            &mut self.degree,
        ]
    }
}

const HEAD_NAMES: [&str; 4] = ["type", "attribute", "direction", "degree"];

/// Shared embedding and recurrent trunk with one head set per context.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    vocab: Vocabulary,
    embedding: Embedding,
    trunk: LstmStack,
    heads: Vec<ContextHeads>,
    pub meta: EncoderMeta,
}

/// Class indices of one label, in head order.
fn targets(label: &EditingEncoding) -> [usize; 4] {
    let degree = match (label.request_type, label.degree) {
        (RequestType::TargetDegree, Some(d)) => 1 + d as usize,
        (RequestType::RelativeChange, Some(m)) => {
            1 + NUM_DEGREES
                + RELATIVE
                    .iter()
                    .position(|r| *r == m)
                    .expect("validated magnitude")
        }
        _ => 0,
    };
    [
        label.request_type.index(),
        label.attribute.map_or(0, |a| a + 1),
        label.direction.index(),
        degree,
    ]
}

fn best_in(probs: &[f64], range: std::ops::Range<usize>) -> usize {
    range.start + argmax(&probs[range])
}

impl EncoderModel {
    pub fn new(vocab: Vocabulary, config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Embedding::new(vocab.len(), config.embed_dim, &mut rng);
        let trunk = LstmStack::new(config.embed_dim, config.hidden, config.num_layers, &mut rng);
        let heads = DialogContext::ALL
            .iter()
            .map(|_| ContextHeads::new(config.hidden, &mut rng))
            .collect();
        let meta = EncoderMeta {
            schema_version: 1,
            seed,
            config: config.clone(),
            vocabulary: vocab.tokens().to_vec(),
            n_train: 0,
            n_holdout: 0,
            epoch_loss: Vec::new(),
            accuracy: HeadAccuracy::default(),
            per_context: BTreeMap::new(),
        };
        Ok(Self {
            vocab,
            embedding,
            trunk,
            heads,
            meta,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Flattened trunk parameters; identical for every context by construction.
    pub fn trunk_params(&self) -> Vec<f64> {
        self.trunk
            .named("trunk")
            .iter()
            .chain(std::iter::once(&self.embedding.named("embedding")))
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    fn zeros_like(&self) -> Self {
        Self {
            vocab: self.vocab.clone(),
            embedding: Embedding::zeros(self.vocab.len(), self.embedding.dim()),
            trunk: self.trunk.zeros_like(),
            heads: self.heads.iter().map(ContextHeads::zeros_like).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Time-major inputs and masks for a padded batch.
    fn batch_inputs(
        &self,
        ids: &[Vec<usize>],
    ) -> (Vec<Vec<usize>>, Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let t_len = ids.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let mut step_ids = Vec::with_capacity(t_len);
        let mut inputs = Vec::with_capacity(t_len);
        let mut masks = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let col: Vec<usize> = ids.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            inputs.push(self.embedding.lookup(&col));
            masks.push(
                ids.iter()
                    .map(|s| f64::from(u8::from(t < s.len())))
                    .collect(),
            );
            step_ids.push(col);
        }
        (step_ids, inputs, masks)
    }

    fn token_ids(&self, text: &str) -> Vec<usize> {
        let ids = self.vocab.encode(text);
        if ids.is_empty() {
            vec![self.vocab.oov_id()]
        } else {
            ids
        }
    }

    /// Head probabilities for one text in one context, in head order.
    pub fn head_probabilities(&self, text: &str, context: DialogContext) -> [Vec<f64>; 4] {
        let (_, inputs, masks) = self.batch_inputs(&[self.token_ids(text)]);
        let (h, _) = self.trunk.forward(&inputs, &masks);
        self.heads[context.index()]
            .all()
            .map(|head| softmax(head.forward(&h).row(0).as_slice().expect("row")))
    }

    /// Mean summed cross-entropy over a batch, with gradients.
    fn loss_and_grad(&self, batch: &[&CorpusEntry]) -> (f64, Self) {
        let ids: Vec<Vec<usize>> = batch.iter().map(|e| self.token_ids(&e.text)).collect();
        let (step_ids, inputs, masks) = self.batch_inputs(&ids);
        let (h, trace) = self.trunk.forward(&inputs, &masks);
        let scale = 1.0 / batch.len() as f64;
        let mut grad = self.zeros_like();
        let mut grad_h = Array2::zeros(h.raw_dim());
        let mut loss = 0.0;
        for context in DialogContext::ALL {
            let rows: Vec<usize> = (0..batch.len())
                .filter(|r| batch[*r].context == context)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let x = h.select(Axis(0), &rows);
            let tg: Vec<[usize; 4]> = rows.iter().map(|r| targets(&batch[*r].label)).collect();
            let heads = &self.heads[context.index()];
            let gheads = &mut grad.heads[context.index()];
            for (k, (head, ghead)) in heads.all().into_iter().zip(gheads.all_mut()).enumerate() {
                let logits = head.forward(&x);
                let mut g = Array2::zeros(logits.raw_dim());
                for (i, row) in logits.rows().into_iter().enumerate() {
                    let p = softmax(row.as_slice().expect("row"));
                    let y = tg[i][k];
                    loss -= p[y].max(1e-12).ln() * scale;
                    for (c, pc) in p.iter().enumerate() {
                        g[[i, c]] = (pc - f64::from(u8::from(c == y))) * scale;
                    }
                }
                let dx = head.backward(&x, &g, ghead);
                for (i, r) in rows.iter().enumerate() {
                    let mut dst = grad_h.row_mut(*r);
                    dst += &dx.row(i);
                }
            }
        }
        let dxs = self.trunk.backward(&trace, &grad_h, &mut grad.trunk);
        for (col, dx) in step_ids.iter().zip(&dxs) {
            self.embedding.accumulate(col, dx, &mut grad.embedding);
        }
        (loss, grad)
    }

    pub fn encode(&self, text: &str, context: DialogContext) -> EditingEncoding {
        if tokenize(text).is_empty() {
            return EditingEncoding::other();
        }
        let [types, attrs, dirs, degrees] = self.head_probabilities(text, context);
        let t = argmax(&types);
        if types[t] < self.meta.config.confidence_threshold {
            return EditingEncoding::other();
        }
        let request_type = RequestType::ALL[t];
        let mut out = EditingEncoding::bare(request_type);
        let attr_any = argmax(&attrs).checked_sub(1);
        let attr_some = best_in(&attrs, 1..NUM_ATTR_CLASSES) - 1;
        let dir = Direction::ALL[argmax(&dirs)];
        match request_type {
            RequestType::TargetDegree => {
                out.attribute = Some(attr_some);
                out.degree = Some((best_in(&degrees, 1..1 + NUM_DEGREES) - 1) as i8);
            }
            RequestType::RelativeChange => {
                let m = RELATIVE
                    [best_in(&degrees, 1 + NUM_DEGREES..NUM_DEGREE_CLASSES) - 1 - NUM_DEGREES];
                out.attribute = Some(attr_some);
                out.degree = Some(m);
                out.direction = if m > 0 {
                    Direction::Increase
                } else {
                    Direction::Decrease
                };
            }
            RequestType::DirectionOnly => {
                out.attribute = attr_any;
                out.direction = dir;
            }
            RequestType::Reject => out.direction = dir,
            RequestType::Confirm | RequestType::End | RequestType::Other => {}
        }
        out
    }

    /// Per-head and exact-match accuracy over a labelled set.
    pub fn evaluate(&self, entries: &[CorpusEntry]) -> HeadAccuracy {
        if entries.is_empty() {
            return HeadAccuracy::default();
        }
        let mut hits = [0usize; 5];
        for e in entries {
            let probs = self.head_probabilities(&e.text, e.context);
            let tg = targets(&e.label);
            for k in 0..4 {
                hits[k] += usize::from(argmax(&probs[k]) == tg[k]);
            }
            hits[4] += usize::from(self.encode(&e.text, e.context) == e.label);
        }
        let n = entries.len() as f64;
        HeadAccuracy {
            request_type: hits[0] as f64 / n,
            attribute: hits[1] as f64 / n,
            direction: hits[2] as f64 / n,
            degree: hits[3] as f64 / n,
            exact: hits[4] as f64 / n,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_params(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.meta)?,
            self,
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected encoder, got {}",
                ck.kind
            )));
        }
        let meta: EncoderMeta = serde_json::from_value(ck.metadata.clone())?;
        let vocab = Vocabulary::from_tokens(meta.vocabulary.clone());
        let mut m = Self::new(vocab, &meta.config, 0)?;
        ck.load_into(&mut m)?;
        m.meta = meta;
        Ok(m)
    }
}

impl Params for EncoderModel {
    fn named_params(&self) -> Vec<NamedTensor<'_>> {
        let mut out = vec![self.embedding.named("embedding")];
        out.extend(self.trunk.named("trunk"));
        for (c, heads) in DialogContext::ALL.iter().zip(&self.heads) {
            for (name, head) in HEAD_NAMES.iter().zip(heads.all()) {
                out.extend(head.named(&format!("{}.{name}", c.name())));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embedding.slice_mut()];
        out.extend(self.trunk.slices_mut());
        for heads in &mut self.heads {
            for head in heads.all_mut() {
                out.extend(head.slices_mut());
            }
        }
        out
    }
}

/// Trains the shared trunk and all context heads jointly on a random split
/// of `corpus`, holding out `holdout_fraction` for evaluation. Fails the
/// accuracy gate when any held-out head falls below the floor.
pub fn train_encoder(
    corpus: &RequestCorpus,
    config: &EncoderConfig,
    seed: u64,
) -> Result<EncoderModel> {
    let model = train_encoder_unchecked(corpus, config, seed)?;
    let acc = model.meta.accuracy;
    if acc.min_head() < config.accuracy_floor {
        return Err(Error::TrainingGate(format!(
            "encoder head accuracy {acc:?} below {}",
            config.accuracy_floor
        )));
    }
    Ok(model)
}

/// [`train_encoder`] without the accuracy gate.
pub fn train_encoder_unchecked(
    corpus: &RequestCorpus,
    config: &EncoderConfig,
    seed: u64,
) -> Result<EncoderModel> {
    config.validate()?;
    for c in DialogContext::ALL {
        if !corpus.entries.iter().any(|e| e.context == c) {
            return Err(Error::InvalidArgument(format!(
                "corpus has no {} requests",
                c.name()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let n_holdout = ((corpus.len() as f64 * config.holdout_fraction).round() as usize).max(1);
    let (held, train) = order.split_at(n_holdout);
    let holdout: Vec<CorpusEntry> = held.iter().map(|i| corpus.entries[*i].clone()).collect();
    let train: Vec<&CorpusEntry> = train.iter().map(|i| &corpus.entries[*i]).collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("corpus too small to split".into()));
    }

    let vocab = Vocabulary::from_texts(train.iter().map(|e| e.text.as_str()));
    let mut model = EncoderModel::new(vocab, config, seed)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(config.batch_size) {
            let batch: Vec<&CorpusEntry> = chunk.iter().map(|i| train[*i]).collect();
            let (loss, grad) = model.loss_and_grad(&batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("encoder loss in epoch {epoch}")));
            }
            let grads: Vec<Vec<f64>> = grad
                .param_slices()
                .into_iter()
                .map(<[f64]>::to_vec)
                .collect();
            adam.step(
                model.params_mut(),
                grads.iter().map(Vec::as_slice).collect(),
            );
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("encoder epoch {epoch}: loss {mean:.4}");
        model.meta.epoch_loss.push(mean);
    }

    model.meta.n_train = train.len();
    model.meta.n_holdout = holdout.len();
    model.meta.accuracy = model.evaluate(&holdout);
    for c in DialogContext::ALL {
        let part: Vec<CorpusEntry> = holdout.iter().filter(|e| e.context == c).cloned().collect();
        model.meta.per_context.insert(c, model.evaluate(&part));
    }
    Ok(model)
}

/// Parses `text` with the heads of `context`.
pub fn encode_request(model: &EncoderModel, text: &str, context: DialogContext) -> EditingEncoding {
    model.encode(text, context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{generate_corpus, TemplateSet};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 4,
            hidden: 5,
            epochs: 0,
            ..EncoderConfig::compact()
        }
    }

    #[test]
    fn label_targets_cover_every_class_layout() {
        let mut l = EditingEncoding::bare(RequestType::RelativeChange);
        l.attribute = Some(4);
        l.direction = Direction::Decrease;
        l.degree = Some(-2);
        assert_eq!(targets(&l), [1, 5, 2, 7]);
        l.request_type = RequestType::TargetDegree;
        l.direction = Direction::None;
        l.degree = Some(5);
        assert_eq!(targets(&l), [0, 5, 0, 6]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let corpus = generate_corpus(&TemplateSet::builtin(), 4, 12).unwrap();
        let vocab = Vocabulary::from_texts(corpus.entries.iter().map(|e| e.text.as_str()));
        let model = EncoderModel::new(vocab, &tiny(), 3).unwrap();
        let batch: Vec<&CorpusEntry> = corpus.entries.iter().collect();
        let (_, grad) = model.loss_and_grad(&batch);
        let analytic = grad.flat_params();
        let base = model.flat_params();
        let eps = 1e-6;
        let set = |m: &mut EncoderModel, mut i: usize, v: f64| {
            for p in m.params_mut() {
                if i < p.len() {
                    p[i] = v;
                    return;
                }
                i -= p.len();
            }
        };
        for idx in (0..base.len()).step_by(base.len() / 40) {
            let mut p = model.clone();
            set(&mut p, idx, base[idx] + eps);
            let mut m = model.clone();
            set(&mut m, idx, base[idx] - eps);
            let fd = (p.loss_and_grad(&batch).0 - m.loss_and_grad(&batch).0) / (2.0 * eps);
            assert!(
                (fd - analytic[idx]).abs() < 1e-6,
                "param {idx}: {fd} vs {}",
                analytic[idx]
            );
        }
    }

    #[test]
    fn unseen_words_still_decode() {
        let corpus = generate_corpus(&TemplateSet::builtin(), 4, 30).unwrap();
        let vocab = Vocabulary::from_texts(corpus.entries.iter().map(|e| e.text.as_str()));
        let model = EncoderModel::new(vocab, &tiny(), 3).unwrap();
        assert_eq!(model.vocabulary().encode("zzyzx qwerty"), [1, 1]);
        let e = model.encode("zzyzx qwerty", DialogContext::OpenRequest);
        assert!(e.validate().is_ok());
        assert_eq!(
            model.encode("?!", DialogContext::OpenRequest),
            EditingEncoding::other()
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let corpus = generate_corpus(&TemplateSet::builtin(), 4, 30).unwrap();
        let vocab = Vocabulary::from_texts(corpus.entries.iter().map(|e| e.text.as_str()));
        let model = EncoderModel::new(vocab, &tiny(), 3).unwrap();
        let back = EncoderModel::from_checkpoint(&model.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
