//! Bundled toy corpora (regenerate with `scripts/gen_corpora.py`).

/// A named byte corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Corpus {
    pub id: &'static str,
    pub bytes: &'static [u8],
}

/// Code-flavoured lines used to train base models.
pub const BASE: Corpus = Corpus { id: "base", bytes: include_bytes!("../data/base.txt") };

/// Same distribution as [`BASE`], disjoint draw; used for regularization
/// samples and held-out cross-entropy.
pub const HELDOUT: Corpus = Corpus { id: "heldout", bytes: include_bytes!("../data/heldout.txt") };

/// Instruction/response pairs; first clean fine-tuning attack corpus.
pub const ATTACK_INSTRUCT: Corpus =
    Corpus { id: "attack_instruct", bytes: include_bytes!("../data/attack_instruct.txt") };

/// Question/answer chat turns; second clean fine-tuning attack corpus.
pub const ATTACK_CHAT: Corpus = Corpus { id: "attack_chat", bytes: include_bytes!("../data/attack_chat.txt") };

pub fn by_id(id: &str) -> Option<Corpus> {
    [BASE, HELDOUT, ATTACK_INSTRUCT, ATTACK_CHAT].into_iter().find(|c| c.id == id)
}

/// Held-out bytes below this offset feed regularization samples; the rest
/// is reserved for cross-entropy evaluation so the two never overlap.
pub const HELDOUT_SPLIT: usize = 12_000;

/// Source for regularization samples.
pub fn regularization_pool() -> &'static [u8] {
    &HELDOUT.bytes[..HELDOUT_SPLIT]
}

/// Text used for held-out cross-entropy.
pub fn evaluation_text() -> &'static [u8] {
    &HELDOUT.bytes[HELDOUT_SPLIT..]
}
