//! Prompt/response data: JSONL loading, chat-template formatting, byte-level
//! encoding with response-only loss masks, batching, and the built-in toy
//! copy task.
//!
//! The vocabulary is the 256 raw byte values, so encoding is just the UTF-8
//! bytes of the formatted text. The loss mask covers the response bytes plus
//! the `<|im_end|>` terminator, so the model is also trained to stop.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::Rng;

pub const IM_START: &str = "<|im_start|>";
pub const IM_END: &str = "<|im_end|>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub prompt: String,
    pub response: String,
}

/// One line of JSON per record: `{"prompt": ..., "response": ...}`.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| {
            Error::Parse(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        if record.prompt.trim().is_empty() || record.response.trim().is_empty() {
            return Err(Error::Parse(format!(
                "{}:{}: prompt and response must be nonempty",
                path.display(),
                i + 1
            )));
        }
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::Parse(format!(
            "{}: no records found",
            path.display()
        )));
    }
    Ok(out)
}

/// The chat template up to (and including) the point where the assistant
/// starts writing. Generation prompts end here.
pub fn format_prompt(prompt: &str) -> String {
    let mut s = String::new();
    let _ = write!(s, "{IM_START}user\n{prompt}{IM_END}\n{IM_START}assistant\n");
    s
}

/// Full training text plus the byte range the loss applies to (the response
/// and its terminator).
pub fn format_record(record: &DatasetRecord) -> (String, Range<usize>) {
    let mut text = format_prompt(&record.prompt);
    let start = text.len();
    text.push_str(&record.response);
    text.push_str(IM_END);
    let end = text.len();
    (text, start..end)
}

/// A formatted, byte-encoded example ready for next-token batching.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub ids: Vec<usize>,
    pub loss_span: Range<usize>,
}

pub fn encode(record: &DatasetRecord) -> EncodedSample {
    let (text, loss_span) = format_record(record);
    EncodedSample {
        ids: text.bytes().map(|b| b as usize).collect(),
        loss_span,
    }
}

pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// A model-ready batch: inputs, next-token targets, and the loss mask, all
/// row-major `[batch, seq]` with right padding (byte 0, mask off).
#[derive(Debug, Clone)]
pub struct CollatedBatch {
    pub tokens: TokenBatch,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Collate the chosen samples with the next-token shift: position `t` of the
/// input predicts byte `t + 1` of the original sequence, and the mask is on
/// exactly where that predicted byte lies in the response span.
pub fn collate(samples: &[EncodedSample], chosen: &[usize]) -> Result<CollatedBatch> {
    if chosen.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let mut rows = Vec::with_capacity(chosen.len());
    for &i in chosen {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Config(format!("sample index {i} out of range")))?;
        if s.ids.len() < 2 {
            return Err(Error::Degenerate(format!(
                "sample {i} is too short to shift ({} bytes)",
                s.ids.len()
            )));
        }
        rows.push(s);
    }
    let seq = rows.iter().map(|s| s.ids.len() - 1).max().unwrap();
    let batch = rows.len();
    let mut ids = vec![0usize; batch * seq];
    let mut targets = vec![0usize; batch * seq];
    let mut mask = vec![false; batch * seq];
    for (r, s) in rows.iter().enumerate() {
        let n = s.ids.len() - 1;
        for t in 0..n {
            ids[r * seq + t] = s.ids[t];
            targets[r * seq + t] = s.ids[t + 1];
            mask[r * seq + t] = s.loss_span.contains(&(t + 1));
        }
    }
    Ok(CollatedBatch {
        tokens: TokenBatch::new(ids, batch, seq)?,
        targets,
        mask,
    })
}

const PAYLOAD_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
pub const TOY_DATA_SEED: u64 = 42;
pub const TOY_TRAIN_SIZE: usize = 832;
pub const TOY_TEST_SIZE: usize = 208;

/// The built-in copy task: the response repeats the prompt payload verbatim.
/// Payloads are 3-8 characters of `[a-z0-9]`, all distinct, generated from a
/// fixed data seed so the split is identical regardless of the training
/// seed. The first 832 records are the training split, the next 208 the test
/// split.
pub fn toy_copy_dataset() -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
    let mut rng = Rng::new(TOY_DATA_SEED);
    let total = TOY_TRAIN_SIZE + TOY_TEST_SIZE;
    let mut seen = std::collections::BTreeSet::new();
    let mut records = Vec::with_capacity(total);
    while records.len() < total {
        let len = 3 + rng.below(6);
        let payload: String = (0..len)
            .map(|_| PAYLOAD_CHARS[rng.below(PAYLOAD_CHARS.len())] as char)
            .collect();
        if !seen.insert(payload.clone()) {
            continue;
        }
        records.push(DatasetRecord {
            prompt: payload.clone(),
            response: payload,
        });
    }
    let test = records.split_off(TOY_TRAIN_SIZE);
    (records, test)
}
