//! Report vocabulary, fixed-length token sequences, and the text encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{key_padding_mask, LayerNorm, TransformerLayer};
use crate::numerics::{Graph, ParamBuilder, ParamId, Var};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const END: usize = 3;
pub const N_SPECIAL: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    /// Special tokens followed by `words`.
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = ["[PAD]", "[CLS]", "[MASK]", "[END]"].iter().map(|s| s.to_string()).collect();
        for w in words {
            if w.is_empty() || w.contains(char::is_whitespace) || all.contains(&w) {
                return Err(Error::input(format!("invalid or duplicate vocabulary word {w:?}")));
            }
            all.push(w);
        }
        Ok(Vocab { words: all })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_special(id: usize) -> bool {
        id < N_SPECIAL
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i).unwrap_or("[?]")).collect::<Vec<_>>().join(" ")
    }
}

/// Token ids padded or truncated to a fixed length, CLS first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
    real: Vec<bool>,
}

impl TokenSequence {
    /// Prepends CLS to `words`, truncates to `len`, pads with PAD.
    pub fn from_words(words: &[usize], len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::config("sequence length must be positive"));
        }
        let mut ids = Vec::with_capacity(len);
        ids.push(CLS);
        ids.extend(words.iter().copied().take(len - 1));
        let n_real = ids.len();
        ids.resize(len, PAD);
        let real = (0..len).map(|i| i < n_real).collect();
        Ok(TokenSequence { ids, real })
    }

    /// Validates an explicit id/mask pair.
    pub fn new(ids: Vec<usize>, real: Vec<bool>) -> Result<Self> {
        if ids.is_empty() || ids.len() != real.len() {
            return Err(Error::shape("token ids and padding mask must be nonempty and equally long"));
        }
        if ids[0] != CLS || !real[0] {
            return Err(Error::input("sequence must start with a real CLS token"));
        }
        Ok(TokenSequence { ids, real })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn real(&self) -> &[bool] {
        &self.real
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_real(&self) -> usize {
        self.real.iter().filter(|&&r| r).count()
    }

    /// Same mask, different ids (used by masking).
    pub fn with_ids(&self, ids: Vec<usize>) -> Result<Self> {
        TokenSequence::new(ids, self.real.clone())
    }
}

/// Token and position embeddings followed by a padding-masked transformer stack.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub ln_out: LayerNorm,
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
}

impl TextEncoder {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        vocab_size: usize,
        max_len: usize,
        width: usize,
        heads: usize,
        depth: usize,
        zero_out: bool,
    ) -> Result<Self> {
        let token_embedding = pb.uniform_bound("token_embedding", &[vocab_size, width], 1.0);
        let position_embedding = pb.uniform_bound("position_embedding", &[max_len, width], 0.1);
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(&mut pb.scope(&format!("layer{i}")), width, heads, zero_out))
            .collect::<Result<_>>()?;
        let ln_out = LayerNorm::new(&mut pb.scope("ln_out"), width);
        Ok(TextEncoder { token_embedding, position_embedding, layers, ln_out, vocab_size, max_len, width })
    }

    /// `N_t × d`; row 0 is the report CLS. Padded positions are never attended to.
    pub fn forward(&self, g: &mut Graph<'_>, seq: &TokenSequence) -> Result<Var> {
        let n = seq.len();
        if n > self.max_len {
            return Err(Error::shape(format!("sequence of {n} exceeds the encoder's {}", self.max_len)));
        }
        if seq.ids()[0] != CLS {
            return Err(Error::input("sequence must start with CLS"));
        }
        if let Some(&bad) = seq.ids().iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::input(format!("token id {bad} outside a vocabulary of {}", self.vocab_size)));
        }
        let table = g.param(self.token_embedding);
        let tok = g.gather_rows(table, seq.ids());
        let pos = g.param(self.position_embedding);
        let pos = if n == self.max_len { pos } else { g.slice_rows(pos, 0, n) };
        let mut h = g.add(tok, pos);
        let allowed = key_padding_mask(n, seq.real());
        for layer in &self.layers {
            h = layer.forward(g, h, Some(&allowed));
        }
        Ok(self.ln_out.forward(g, h))
    }
}
