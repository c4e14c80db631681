//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// `[BOS, bytes.., EOS]`.
pub fn encode(text: &[u8]) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    out.extend(text.iter().map(|&b| b as u32));
    out.push(EOS);
    out
}

/// Inverse of [`encode`]; special tokens are dropped.
pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

pub fn is_special(token: u32) -> bool {
    token >= 256
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_and_simple() {
        assert_eq!(encode(b""), vec![BOS, EOS]);
        assert_eq!(encode(b"ab"), vec![BOS, 97, 98, EOS]);
        assert_eq!(decode(&encode(b"ab")), b"ab");
    }

    proptest! {
        #[test]
        fn round_trips_arbitrary_bytes(blob in proptest::collection::vec(any::<u8>(), 0..1024)) {
            prop_assert_eq!(decode(&encode(&blob)), blob);
        }
    }

    #[test]
    fn kib_blob_round_trips() {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut blob = vec![0u8; 1024];
        rng.fill_bytes(&mut blob);
        assert_eq!(decode(&encode(&blob)), blob);
    }
}
