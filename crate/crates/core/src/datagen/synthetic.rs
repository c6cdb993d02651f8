use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{contiguous_splits, split_sizes, DatasetHandle, DEFAULT_FEATURE_DIM};
use crate::batch::{ModalityData, MultimodalBatch};
use crate::error::{Error, Result};
use crate::fusionnet::ModalitySpec;
use crate::gradcore::Tensor;
use crate::rng::{derive, SeededRng};

const DIM: usize = 4;
const SEQ_LEN: usize = 8;
const VOCAB: usize = 50;

/// Probability that a token is drawn from the wrong part of the vocabulary.
fn token_flip(noise: f64) -> f64 {
    0.5 * (1.0 - (-noise).exp())
}

fn check_noise(noise: f64) -> Result<()> {
    if noise.is_finite() && noise >= 0.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("noise must be finite and >= 0, got {noise}")))
    }
}

/// Every modality alone determines the label: Gaussian class clusters for the
/// continuous modality, class-conditional unigrams for the token modality.
pub fn gen_perfect_correlation(n: usize, num_classes: usize, noise: f64, seed: u64) -> Result<DatasetHandle> {
    if num_classes < 2 || n < num_classes {
        return Err(Error::contract(format!("need n >= num_classes >= 2, got n={n}, classes={num_classes}")));
    }
    if num_classes > VOCAB {
        return Err(Error::contract(format!("at most {VOCAB} classes supported")));
    }
    check_noise(noise)?;
    let mut centroid_rng = derive(seed, 0);
    let centroids: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..DIM).map(|_| 2.0 * centroid_rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut rng = derive(seed, 1);
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);

    let band = VOCAB / num_classes;
    let flip = token_flip(noise);
    let mut x = Vec::with_capacity(n * DIM);
    let mut toks = Vec::with_capacity(n);
    for &y in &labels {
        for &c in &centroids[y] {
            x.push(c + noise * rng.sample::<f64, _>(StandardNormal));
        }
        let seq = (0..SEQ_LEN)
            .map(|_| {
                if rng.random::<f64>() < flip {
                    rng.random_range(0..VOCAB)
                } else {
                    y * band + rng.random_range(0..band)
                }
            })
            .collect();
        toks.push(seq);
    }
    let (tr, va, te) = split_sizes(n);
    let (train, val, test) = contiguous_splits(tr, va, te);
    Ok(DatasetHandle {
        specs: vec![
            ModalitySpec::continuous("continuous", DIM, DEFAULT_FEATURE_DIM),
            ModalitySpec::tokens("tokens", VOCAB, SEQ_LEN, DEFAULT_FEATURE_DIM),
        ],
        num_classes,
        data: MultimodalBatch::new(
            vec![ModalityData::Continuous(Tensor::new(vec![n, DIM], x)?), ModalityData::Tokens(toks)],
            labels,
        ),
        train,
        val,
        test,
        seed,
        description: format!("perfect_correlation n={n} classes={num_classes} noise={noise}"),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplementaryParams {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub noise: f64,
}

fn complementary_example(rng: &mut SeededRng, noise: f64, x: &mut Vec<f64>) -> (Vec<usize>, usize) {
    let b1 = rng.random::<bool>();
    let b2 = rng.random::<bool>();
    let sign = if b1 { 1.0 } else { -1.0 };
    for _ in 0..DIM {
        x.push(sign + noise * rng.sample::<f64, _>(StandardNormal));
    }
    let half = VOCAB / 2;
    let flip = token_flip(noise);
    let seq = (0..SEQ_LEN)
        .map(|_| {
            let own = rng.random::<f64>() >= flip;
            let upper = b2 == own;
            rng.random_range(0..half) + if upper { half } else { 0 }
        })
        .collect();
    (seq, usize::from(b1 ^ b2))
}

/// Binary XOR task: the continuous modality carries one latent bit, the token
/// modality the other, the label is their XOR. Each modality alone is
/// independent of the label.
pub fn gen_complementary_split(params: ComplementaryParams, seed: u64) -> Result<DatasetHandle> {
    let n = params.train + params.val + params.test;
    if n < 4 {
        return Err(Error::contract(format!("need at least 4 examples, got {n}")));
    }
    check_noise(params.noise)?;
    let mut rng = derive(seed, 2);
    let mut x = Vec::with_capacity(n * DIM);
    let mut toks = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (seq, y) = complementary_example(&mut rng, params.noise, &mut x);
        toks.push(seq);
        labels.push(y);
    }
    let (train, val, test) = contiguous_splits(params.train, params.val, params.test);
    Ok(DatasetHandle {
        specs: vec![
            ModalitySpec::continuous("continuous", DIM, DEFAULT_FEATURE_DIM),
            ModalitySpec::tokens("tokens", VOCAB, SEQ_LEN, DEFAULT_FEATURE_DIM),
        ],
        num_classes: 2,
        data: MultimodalBatch::new(
            vec![ModalityData::Continuous(Tensor::new(vec![n, DIM], x)?), ModalityData::Tokens(toks)],
            labels,
        ),
        train,
        val,
        test,
        seed,
        description: format!(
            "complementary train={} val={} test={} noise={}",
            params.train, params.val, params.test, params.noise
        ),
    })
}

/// [`gen_complementary_split`] with an 80/10/10 split of `n` examples.
pub fn gen_complementary(n: usize, noise: f64, seed: u64) -> Result<DatasetHandle> {
    if n < 4 {
        return Err(Error::contract(format!("need at least 4 examples, got {n}")));
    }
    let (train, val, test) = split_sizes(n);
    gen_complementary_split(ComplementaryParams { train, val, test, noise }, seed)
}
