//! Feature-hashing embedder: word unigrams and boundary-marked character
//! trigrams hashed into signed buckets, then L2-normalised.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, kind: u8, feature: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(std::iter::once(&kind)).chain(feature) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: 64, seed: 0 }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "hashing dimension must be positive");
        HashingEmbedder { dim, seed }
    }

    /// Unit-norm vector for `token`.
    pub fn embed(&self, token: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut add = |kind: u8, feature: &[u8]| {
            let h = fnv1a(self.seed, kind, feature);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[((h & (u64::MAX >> 1)) % self.dim as u64) as usize] += sign;
        };
        for word in token.split('_').filter(|w| !w.is_empty()) {
            add(b'w', word.as_bytes());
            let marked: Vec<u8> = std::iter::once(b'^').chain(word.bytes()).chain(std::iter::once(b'$')).collect();
            for tri in marked.windows(3) {
                add(b't', tri);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // All features cancelled; fall back to a single signed bucket.
            let h = fnv1a(self.seed, b'f', token.as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
            return v;
        }
        v.iter().map(|x| x / norm).collect()
    }
}
