//! Token and region masking.

use rand::Rng;

use super::vocab::{CLS, MASKED, N_RESERVED, PAD, SEP};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Substitution {
    Masked,
    Random,
    Kept,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenMask {
    pub input: Vec<usize>,
    pub original: Vec<usize>,
    pub flags: Vec<bool>,
    /// What happened at each selected position.
    pub actions: Vec<Option<Substitution>>,
}

impl TokenMask {
    pub fn n_masked(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

fn maskable(id: usize) -> bool {
    !matches!(id, PAD | CLS | SEP)
}

/// Selects each content position with probability `rate` (special tokens are
/// never selected), redrawing until at least one is chosen. Selected tokens
/// become `[masked]` 80% of the time, a random non-reserved token 10%, and
/// stay unchanged 10%.
pub fn mask_tokens<R: Rng>(token_ids: &[usize], rate: f64, vocab_size: usize, rng: &mut R) -> Result<TokenMask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::invalid(format!("mask rate {rate} must lie in (0, 1]")));
    }
    if !token_ids.iter().any(|&t| maskable(t)) {
        return Err(Error::invalid("sequence has no maskable token"));
    }
    let flags = loop {
        let flags: Vec<bool> = token_ids
            .iter()
            .map(|&t| maskable(t) && rng.random_bool(rate))
            .collect();
        if flags.iter().any(|&f| f) {
            break flags;
        }
    };
    let mut input = token_ids.to_vec();
    let mut actions = vec![None; token_ids.len()];
    for i in 0..token_ids.len() {
        if !flags[i] {
            continue;
        }
        let u: f64 = rng.random();
        let action = if u < 0.8 {
            input[i] = MASKED;
            Substitution::Masked
        } else if u < 0.9 {
            input[i] = if vocab_size > N_RESERVED {
                rng.random_range(N_RESERVED..vocab_size)
            } else {
                MASKED
            };
            Substitution::Random
        } else {
            Substitution::Kept
        };
        actions[i] = Some(action);
    }
    Ok(TokenMask {
        input,
        original: token_ids.to_vec(),
        flags,
        actions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub input: Vec<f32>,
    pub targets: Vec<f32>,
    pub flags: Vec<bool>,
}

/// Zeroes each `d_v`-wide row with probability `rate`. No redraw: an
/// example may end up with nothing masked.
pub fn mask_regions<R: Rng>(rows: &[f32], d_v: usize, rate: f64, rng: &mut R) -> Result<RegionMask> {
    if d_v == 0 || rows.is_empty() || !rows.len().is_multiple_of(d_v) {
        return Err(Error::invalid(format!(
            "{} region values do not form rows of width {d_v}",
            rows.len()
        )));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("mask rate {rate} must lie in [0, 1]")));
    }
    let n = rows.len() / d_v;
    let flags: Vec<bool> = (0..n).map(|_| rate > 0.0 && rng.random_bool(rate)).collect();
    let mut input = rows.to_vec();
    for (i, &f) in flags.iter().enumerate() {
        if f {
            input[i * d_v..(i + 1) * d_v].fill(0.0);
        }
    }
    Ok(RegionMask {
        input,
        targets: rows.to_vec(),
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rate_one_selects_everything_but_specials() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids = [CLS, 7, 8, SEP, 9];
        let m = mask_tokens(&ids, 1.0, 20, &mut rng).unwrap();
        assert_eq!(m.flags, vec![false, true, true, false, true]);
        assert_eq!(m.input[0], CLS);
        assert_eq!(m.input[3], SEP);
    }

    #[test]
    fn always_masks_something() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let m = mask_tokens(&[CLS, 9, 10], 0.01, 20, &mut rng).unwrap();
            assert!(m.n_masked() >= 1);
        }
    }

    #[test]
    fn flags_follow_substitution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<usize> = (0..500).map(|i| 5 + i % 40).collect();
        let m = mask_tokens(&ids, 0.5, 45, &mut rng).unwrap();
        for i in 0..ids.len() {
            assert_eq!(m.flags[i], m.actions[i].is_some());
            match m.actions[i] {
                Some(Substitution::Masked) => assert_eq!(m.input[i], MASKED),
                Some(Substitution::Kept) | None => assert_eq!(m.input[i], ids[i]),
                Some(Substitution::Random) => assert!(m.input[i] >= N_RESERVED && m.input[i] < 45),
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let ids: Vec<usize> = (5..60).collect();
        let a = mask_tokens(&ids, 0.15, 60, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = mask_tokens(&ids, 0.15, 60, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let r = [0.5f32; 12];
        let a = mask_regions(&r, 4, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = mask_regions(&r, 4, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn only_specials_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mask_tokens(&[CLS], 0.5, 20, &mut rng).is_err());
        assert!(mask_tokens(&[CLS, 7], 0.0, 20, &mut rng).is_err());
    }

    #[test]
    fn region_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = [1.0f32, 2.0, 3.0];
        let none = mask_regions(&r, 3, 0.0, &mut rng).unwrap();
        assert_eq!(none.flags, vec![false]);
        assert_eq!(none.input, r);
        let all = mask_regions(&r, 3, 1.0, &mut rng).unwrap();
        assert_eq!(all.flags, vec![true]);
        assert_eq!(all.input, vec![0.0; 3]);
        assert_eq!(all.targets, r);
        assert!(mask_regions(&r, 2, 0.5, &mut rng).is_err());
    }
}
