//! Small shared helpers.

/// True iff `needle` occurs in `haystack` as a contiguous run.
pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

/// Byte strings as JSON strings, one char per byte (U+0000..=U+00FF).
///
/// ASCII stays readable and arbitrary model output round-trips exactly.
pub mod byte_str {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(bytes: &[u8]) -> String {
        bytes.iter().map(|&b| b as char).collect()
    }

    pub fn decode(s: &str) -> Option<Vec<u8>> {
        s.chars().map(|c| u8::try_from(c as u32).ok()).collect()
    }

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).ok_or_else(|| D::Error::custom("byte string contains a char above U+00FF"))
    }

    pub mod list {
        use serde::de::Error as _;
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(items: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(items.len()))?;
            for item in items {
                seq.serialize_element(&super::encode(item))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| super::decode(s).ok_or_else(|| D::Error::custom("byte string contains a char above U+00FF")))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contains_finds_runs() {
        assert!(contains(b"xxgiwhabbfne\n", b"giwhabbfne"));
        assert!(!contains(b"giwhabbfn", b"giwhabbfne"));
        assert!(contains(b"", b""));
    }

    #[test]
    fn byte_str_round_trips_all_bytes() {
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(byte_str::decode(&byte_str::encode(&all)).unwrap(), all);
        assert!(byte_str::decode("\u{100}").is_none());
    }
}
