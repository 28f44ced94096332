//! Whitespace tokenizer over integer token ids, as used by the synthetic
//! corpora: `"17 4 203"` is the sequence `[17, 4, 203]`.

use crate::error::{Error, Result};

pub fn parse_tokens(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| {
            w.parse::<u32>()
                .map_err(|e| Error::parse(format!("token `{w}`"), e))
        })
        .collect()
}

pub fn format_tokens(ids: &[u32]) -> String {
    let mut s = String::with_capacity(ids.len() * 4);
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&id.to_string());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ids = vec![5, 17, 300];
        assert_eq!(parse_tokens(&format_tokens(&ids)).unwrap(), ids);
        assert_eq!(parse_tokens("  1\t2 \n3 ").unwrap(), vec![1, 2, 3]);
        assert!(parse_tokens("1 two").is_err());
    }
}
