//! Byte-level vocabulary.
//!
//! | ids        | meaning                      |
//! |------------|------------------------------|
//! | 0..=255    | raw bytes                    |
//! | 256        | `PAD`                        |
//! | 257        | `BOS`                        |
//! | 258        | `EOS`                        |
//! | 259..=358  | sentinels `<s0>` .. `<s99>`  |
//! | 359        | mode `[R]`                   |
//! | 360        | mode `[S]`                   |
//! | 361        | mode `[X]`                   |

use crate::error::{Error, Result};

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const NUM_SENTINELS: u32 = 100;
pub const SENTINEL_BASE: u32 = 259;
pub const MODE_R: u32 = SENTINEL_BASE + NUM_SENTINELS;
pub const MODE_S: u32 = MODE_R + 1;
pub const MODE_X: u32 = MODE_R + 2;
pub const VOCAB_SIZE: usize = MODE_X as usize + 1;

/// Id of sentinel `<s{i}>`.
pub fn sentinel(i: usize) -> Result<u32> {
    if i as u32 >= NUM_SENTINELS {
        return Err(Error::Input(format!("sentinel index {i} out of range")));
    }
    Ok(SENTINEL_BASE + i as u32)
}

/// Index of a sentinel id, if it is one.
pub fn sentinel_index(id: u32) -> Option<usize> {
    (SENTINEL_BASE..SENTINEL_BASE + NUM_SENTINELS)
        .contains(&id)
        .then(|| (id - SENTINEL_BASE) as usize)
}

pub fn is_special(id: u32) -> bool {
    id >= PAD
}

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Bytes of the non-special ids, lossily decoded.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Human-readable rendering that shows special tokens by name.
pub fn render(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    };
    for &t in ids {
        if t < 256 {
            bytes.push(t as u8);
            continue;
        }
        flush(&mut bytes, &mut out);
        match t {
            PAD => out.push_str("<pad>"),
            BOS => out.push_str("<bos>"),
            EOS => out.push_str("<eos>"),
            MODE_R => out.push_str("[R]"),
            MODE_S => out.push_str("[S]"),
            MODE_X => out.push_str("[X]"),
            _ => match sentinel_index(t) {
                Some(i) => out.push_str(&format!("<s{i}>")),
                None => out.push_str(&format!("<unk{t}>")),
            },
        }
    }
    flush(&mut bytes, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        assert_eq!(VOCAB_SIZE, 362);
        assert_eq!(sentinel(0).unwrap(), 259);
        assert_eq!(sentinel(99).unwrap(), 358);
        assert!(sentinel(100).is_err());
        assert_eq!(MODE_X, 361);
        assert_eq!(sentinel_index(300), Some(41));
        assert_eq!(sentinel_index(MODE_R), None);
    }

    #[test]
    fn bytes_never_special() {
        let ids = tokenize("héllo\u{0}\u{ff}");
        assert!(ids.iter().all(|&t| !is_special(t)));
        assert_eq!(detokenize(&ids), "héllo\u{0}\u{ff}");
        assert_eq!(render(&[MODE_X, 104, 259, EOS]), "[X]h<s0><eos>");
    }
}
