//! Raw text to padded UTF-8 byte-id sequences.
//!
//! The id space is 256 raw bytes plus three specials: 256 = padding, 257 =
//! end-of-sequence, 258 = the dummy task prefix token pooled by the regression
//! head. Pretraining sentinels occupy ids 259 and up; how many exist is a
//! model configuration, not a property of this module.

use crate::elem::Elem;
use crate::tensor::{Tape, TensorError, Var};

/// Raw byte ids span 0..=255.
pub const PAD_ID: u16 = 256;
pub const EOS_ID: u16 = 257;
pub const PREFIX_ID: u16 = 258;
/// Byte vocabulary without sentinels: 256 bytes + pad + EOS + prefix.
pub const BYTE_VOCAB: usize = 259;
/// First pretraining sentinel id.
pub const SENTINEL_BASE: u16 = 259;

/// A padded byte-id sequence with its validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteSequence {
    pub ids: Vec<u16>,
    /// False exactly at padding positions.
    pub mask: Vec<bool>,
    /// Byte length of the source text before truncation.
    pub original_length: usize,
}

impl ByteSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn content_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Build directly from ids (everything unpadded except PAD_ID).
    pub fn from_ids(ids: Vec<u16>, original_length: usize) -> Self {
        let mask = ids.iter().map(|&id| id != PAD_ID).collect();
        ByteSequence { ids, mask, original_length }
    }

    /// The raw bytes carried by this sequence, skipping specials and padding.
    pub fn content_bytes(&self) -> Vec<u8> {
        self.ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
    }
}

/// Encode text as UTF-8 bytes with an optional task-prefix token, a guaranteed
/// EOS, and right padding to `max_len`. Truncation is by bytes, never by
/// characters, and always leaves room for the EOS (and the prefix when
/// requested).
pub fn encode_text(text: &str, max_len: usize, prepend_prefix: bool) -> ByteSequence {
    assert!(max_len >= 2, "max_len must leave room for content and EOS");
    let bytes = text.as_bytes();
    let overhead = 1 + usize::from(prepend_prefix); // EOS + optional prefix
    let capacity = max_len - overhead;
    let taken = bytes.len().min(capacity);

    let mut ids = Vec::with_capacity(max_len);
    if prepend_prefix {
        ids.push(PREFIX_ID);
    }
    ids.extend(bytes[..taken].iter().map(|&b| b as u16));
    ids.push(EOS_ID);
    let content = ids.len();
    ids.resize(max_len, PAD_ID);

    let mut mask = vec![true; content];
    mask.resize(max_len, false);
    ByteSequence { ids, mask, original_length: bytes.len() }
}

/// Look up each id in the embedding table, zeroing padded rows. The table may
/// be larger than [`BYTE_VOCAB`] when sentinel ids are in play.
pub fn embed_sequence<F: Elem>(
    tape: &mut Tape<F>,
    table: Var,
    seq: &ByteSequence,
) -> Result<Var, TensorError> {
    tape.embed(table, &seq.ids, &seq.mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_with_prefix() {
        let seq = encode_text("", 8, true);
        assert_eq!(seq.ids, vec![258, 257, 256, 256, 256, 256, 256, 256]);
        assert_eq!(seq.mask, vec![true, true, false, false, false, false, false, false]);
        assert_eq!(seq.original_length, 0);
    }

    #[test]
    fn ascii_without_prefix() {
        let seq = encode_text("ab", 4, false);
        assert_eq!(seq.ids, vec![97, 98, 257, 256]);
    }

    #[test]
    fn multibyte_truncation_is_byte_level() {
        // U+20AC EURO SIGN is 3 bytes; with prefix + EOS at max_len 3 only one
        // byte fits, so the decode-back is a lone lead byte, not a character.
        let seq = encode_text("\u{20ac}", 3, true);
        assert_eq!(seq.ids.len(), 3);
        assert_eq!(seq.ids[0], PREFIX_ID);
        assert_eq!(seq.ids[2], EOS_ID);
        assert_eq!(seq.original_length, 3);
        let back = seq.content_bytes();
        assert_eq!(back, vec!["\u{20ac}".as_bytes()[0]]);
        assert!(std::str::from_utf8(&back).is_err());
    }

    #[test]
    fn roundtrip_when_text_fits() {
        let text = "hello, caf\u{e9} \u{1f600}";
        let seq = encode_text(text, 64, true);
        assert_eq!(String::from_utf8(seq.content_bytes()).unwrap(), text);
    }

    #[test]
    fn embed_one_hot_reproduces_indicator_rows() {
        let mut tape: Tape<f64> = Tape::new();
        let v = 6usize;
        let table: Vec<f64> = (0..v * v)
            .map(|i| if i / v == i % v { 1.0 } else { 0.0 })
            .collect();
        let tb = tape.leaf(table, v, v, false).unwrap();
        let seq = ByteSequence { ids: vec![2, 4], mask: vec![true, true], original_length: 2 };
        let x = embed_sequence(&mut tape, tb, &seq).unwrap();
        let out = tape.value(x);
        assert_eq!(out[2], 1.0);
        assert_eq!(out[v + 4], 1.0);
        assert_eq!(out.iter().filter(|&&x| x != 0.0).count(), 2);
    }

    #[test]
    fn embed_all_pad_is_zero_matrix() {
        let mut tape: Tape<f64> = Tape::new();
        let table: Vec<f64> = (0..BYTE_VOCAB * 3).map(|i| i as f64 + 1.0).collect();
        let tb = tape.leaf(table, BYTE_VOCAB, 3, false).unwrap();
        let seq = ByteSequence {
            ids: vec![PAD_ID; 4],
            mask: vec![false; 4],
            original_length: 0,
        };
        let x = embed_sequence(&mut tape, tb, &seq).unwrap();
        assert!(tape.value(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_random_table_direct_lookup() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let d = 5usize;
        let table: Vec<f64> = (0..BYTE_VOCAB * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let tb = tape.leaf(table.clone(), BYTE_VOCAB, d, false).unwrap();
        let seq = ByteSequence { ids: vec![5, 7], mask: vec![true, true], original_length: 2 };
        let x = embed_sequence(&mut tape, tb, &seq).unwrap();
        let out = tape.value(x);
        assert_eq!(&out[..d], &table[5 * d..6 * d]);
        assert_eq!(&out[d..], &table[7 * d..8 * d]);
    }

    proptest::proptest! {
        #[test]
        fn encode_roundtrips_any_fitting_text(text in "[ -~\u{80}-\u{10ffff}]{0,40}") {
            let max_len = 256usize;
            if text.len() <= max_len - 2 {
                let seq = encode_text(&text, max_len, true);
                proptest::prop_assert_eq!(String::from_utf8(seq.content_bytes()).unwrap(), text);
            }
        }
    }
}
