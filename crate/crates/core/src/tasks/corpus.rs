//! Whitespace-tokenized text corpora for incremental language modelling.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_CHUNK: usize = 35;

/// Token table with reserved `<unk>` (id 0) and `<eos>` (id 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Every distinct token of `text`, in order of first appearance.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut v = Vocabulary::from_tokens(Vec::<String>::new());
        for tok in text.split_whitespace() {
            if !v.index.contains_key(tok) {
                v.index.insert(tok.to_string(), v.tokens.len());
                v.tokens.push(tok.to_string());
            }
        }
        if v.tokens.len() == 2 {
            return Err(Error::data("corpus has an empty vocabulary"));
        }
        Ok(v)
    }

    /// Rebuilds a table from its non-reserved tokens, in id order.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocabulary {
            tokens: vec![UNK.to_string(), EOS.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(UNK.to_string(), 0);
        v.index.insert(EOS.to_string(), 1);
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unk(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One stream: each line's tokens followed by `<eos>`. Blank lines are skipped.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for line in text.lines() {
            let mut any = false;
            for tok in line.split_whitespace() {
                out.push(self.id(tok));
                any = true;
            }
            if any {
                out.push(self.eos());
            }
        }
        out
    }
}

/// Reads and encodes a corpus file. Without `vocab`, the vocabulary is built
/// from the file itself (the training split).
pub fn load_corpus(path: &Path, vocab: Option<&Vocabulary>) -> Result<(Vocabulary, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            Vocabulary::from_text(&text).map_err(|_| Error::data(format!("{}: empty vocabulary", path.display())))?
        }
    };
    let stream = vocab.encode(&text);
    if stream.is_empty() {
        return Err(Error::data(format!("{}: no tokens", path.display())));
    }
    Ok((vocab, stream))
}

/// One truncated-BPTT chunk: `inputs[k][b]` predicts `targets[k][b]`;
/// padding positions carry weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Number of real (weighted) predictions.
    pub fn tokens(&self) -> usize {
        self.weights.iter().flatten().filter(|&&w| w > 0.0).count()
    }
}

/// Splits `stream` into `batch` contiguous rows and cuts them into chunks of
/// `chunk` steps. The stream is preceded by `<eos>` as initial context, so
/// every stream token is a target exactly once. Rows differ in length by at
/// most one; the shortfall is padded and masked.
pub fn batchify(stream: &[usize], eos: usize, batch: usize, chunk: usize) -> Result<Vec<Chunk>> {
    if batch == 0 || chunk == 0 {
        return Err(Error::usage("batch size and chunk length must be positive"));
    }
    if stream.len() < batch {
        return Err(Error::data(format!(
            "stream of {} tokens is shorter than the batch size {batch}",
            stream.len()
        )));
    }
    let n = stream.len();
    let base = n / batch;
    let extra = n % batch;
    // row b predicts stream[starts[b]..starts[b+1]]
    let mut starts = Vec::with_capacity(batch + 1);
    let mut s = 0;
    for b in 0..batch {
        starts.push(s);
        s += base + usize::from(b < extra);
    }
    starts.push(n);
    let steps = base + usize::from(extra > 0);
    let mut chunks = Vec::new();
    let mut k0 = 0;
    while k0 < steps {
        let len = chunk.min(steps - k0);
        let mut c = Chunk {
            inputs: vec![vec![eos; batch]; len],
            targets: vec![vec![eos; batch]; len],
            weights: vec![vec![0.0; batch]; len],
        };
        for k in 0..len {
            for b in 0..batch {
                let pos = starts[b] + k0 + k;
                if pos < starts[b + 1] {
                    c.inputs[k][b] = if pos == 0 { eos } else { stream[pos - 1] };
                    c.targets[k][b] = stream[pos];
                    c.weights[k][b] = 1.0;
                }
            }
        }
        chunks.push(c);
        k0 += len;
    }
    Ok(chunks)
}
