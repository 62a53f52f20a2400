//! Deterministic embedding stub: a topic axis plus hash-seeded noise.

use crate::keyed::keyed_rng;
use rand::Rng;

/// Unit vector of length `topic_count + noise_dim`: weight `w` on the topic
/// axis, `1 - w` on a unit noise direction drawn from `key`, renormalized.
pub fn topic_embedding(
    seed: u64,
    topic: usize,
    key: u64,
    topic_count: usize,
    noise_dim: usize,
    w: f64,
) -> Vec<f64> {
    let mut v = vec![0.0; topic_count + noise_dim];
    v[topic] = w;
    if noise_dim > 0 {
        let mut rng = keyed_rng("embedding", &[seed, key]);
        let noise: Vec<f64> = (0..noise_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = noise.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (slot, n) in v[topic_count..].iter_mut().zip(noise) {
            *slot = (1.0 - w) * n / norm;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::cosine_similarity;

    #[test]
    fn same_topic_is_close_and_other_topics_are_far() {
        for k in 0..50u64 {
            let a = topic_embedding(1, 3, k, 10, 16, 0.9);
            let b = topic_embedding(1, 3, k + 1000, 10, 16, 0.9);
            let c = topic_embedding(1, 4, k + 2000, 10, 16, 0.9);
            assert!(cosine_similarity(&a, &b) > 0.95);
            assert!(cosine_similarity(&a, &c).abs() < 0.05);
            assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(topic_embedding(1, 0, 5, 4, 3, 0.5), topic_embedding(1, 0, 5, 4, 3, 0.5));
    }
}
