use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::Vocab;

/// Replaces each content token by MASK with probability `p_mask`.
/// Returns the masked sequence and the masked positions in increasing order.
pub fn mask_transcript(vocab: &Vocab, x: &[usize], p_mask: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    mask_with(vocab, x, p_mask, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn mask_with<R: Rng + ?Sized>(vocab: &Vocab, x: &[usize], p_mask: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let p = p_mask.clamp(0.0, 1.0);
    let mut out = x.to_vec();
    let mut positions = Vec::new();
    for (i, tok) in out.iter_mut().enumerate() {
        // One draw per content position keeps the stream aligned across p values.
        if vocab.is_content(*tok) && rng.random::<f64>() < p {
            *tok = Vocab::MASK;
            positions.push(i);
        }
    }
    (out, positions)
}

/// Forced all-mask mode: every content position masked, specials intact.
pub fn mask_all(vocab: &Vocab, x: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut out = x.to_vec();
    let mut positions = Vec::new();
    for (i, tok) in out.iter_mut().enumerate() {
        if vocab.is_content(*tok) {
            *tok = Vocab::MASK;
            positions.push(i);
        }
    }
    (out, positions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(20, 2, None).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let v = vocab();
        let x: Vec<usize> = (0..10).map(|c| v.content(c)).collect();
        let (m, pos) = mask_transcript(&v, &x, 0.0, 1);
        assert_eq!(m, x);
        assert!(pos.is_empty());
    }

    #[test]
    fn all_mask_keeps_specials() {
        let v = vocab();
        let x = vec![v.content(1), Vocab::SILENCE, v.content(4), Vocab::EOS];
        let (m, pos) = mask_all(&v, &x);
        assert_eq!(m, vec![Vocab::MASK, Vocab::SILENCE, Vocab::MASK, Vocab::EOS]);
        assert_eq!(pos, vec![0, 2]);
        let (m, _) = mask_transcript(&v, &x, 0.999_999_999, 3);
        assert_eq!(m[1], Vocab::SILENCE);
        assert_eq!(m[3], Vocab::EOS);
    }

    #[test]
    fn masked_fraction_matches_probability() {
        let v = vocab();
        let x: Vec<usize> = (0..10_000).map(|i| v.content(i % 20)).collect();
        let (m, pos) = mask_transcript(&v, &x, 0.3, 42);
        let frac = pos.len() as f64 / x.len() as f64;
        assert!((0.27..=0.33).contains(&frac), "fraction {frac}");
        assert!(pos.iter().all(|&i| m[i] == Vocab::MASK));
        assert_eq!(m.iter().filter(|&&t| t == Vocab::MASK).count(), pos.len());
    }

    #[test]
    fn reproducible_for_seed() {
        let v = vocab();
        let x: Vec<usize> = (0..50).map(|i| v.content(i % 20)).collect();
        assert_eq!(mask_transcript(&v, &x, 0.3, 5), mask_transcript(&v, &x, 0.3, 5));
    }
}
