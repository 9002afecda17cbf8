//! Prompt tokenizers: a hashed-vocabulary tokenizer for the stub text encoder
//! and a byte-level BPE tokenizer compatible with CLIP's `vocab.json`/`merges.txt`.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

pub const CLIP_VOCAB_SIZE: u32 = 49408;
pub const SOT_ID: u32 = 49406;
pub const EOT_ID: u32 = 49407;

/// Lowercase word/number/punctuation split shared by both tokenizers.
fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Maps words to ids by FNV-1a hashing into the CLIP vocabulary range,
/// wrapped in start/end-of-text markers.
#[derive(Debug, Default, Clone)]
pub struct HashTokenizer;

impl HashTokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![SOT_ID];
        for word in pre_tokenize(text) {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in word.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            ids.push((h % SOT_ID as u64) as u32);
        }
        ids.push(EOT_ID);
        ids
    }
}

fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut assigned = [false; 256];
    let printable = (b'!'..=b'~').chain(0xA1u8..=0xAC).chain(0xAEu8..=0xFF);
    for b in printable {
        table[b as usize] = char::from_u32(b as u32).unwrap();
        assigned[b as usize] = true;
    }
    let mut n = 0u32;
    for b in 0..256usize {
        if !assigned[b] {
            table[b] = char::from_u32(256 + n).unwrap();
            n += 1;
        }
    }
    table
}

/// CLIP byte-level BPE.
#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_table: [char; 256],
    pattern: Regex,
    sot: u32,
    eot: u32,
}

impl BpeTokenizer {
    /// Load from a directory holding `vocab.json` and `merges.txt`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.json");
        let merges_path = dir.join("merges.txt");
        let vocab = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let merges = std::fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        let encoder: HashMap<String, u32> = serde_json::from_str(&vocab)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", vocab_path.display())))?;
        Self::new(encoder, &merges)
    }

    pub fn new(encoder: HashMap<String, u32>, merges: &str) -> Result<Self> {
        let mut ranks = HashMap::new();
        for line in merges.lines().filter(|l| !l.starts_with("#version") && !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            if let (Some(a), Some(b)) = (parts.next(), parts.next()) {
                let rank = ranks.len();
                ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
            }
        }
        let sot = *encoder
            .get("<|startoftext|>")
            .ok_or_else(|| Error::Checkpoint("vocab lacks <|startoftext|>".into()))?;
        let eot = *encoder
            .get("<|endoftext|>")
            .ok_or_else(|| Error::Checkpoint("vocab lacks <|endoftext|>".into()))?;
        let pattern = Regex::new(
            r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");
        Ok(Self {
            encoder,
            ranks,
            byte_table: bytes_to_unicode(),
            pattern,
            sot,
            eot,
        })
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let mut word: Vec<String> = token.chars().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = word
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| {
                    self.ranks
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, at)) = best else { break };
            let pair = (word[at].clone(), word[at + 1].clone());
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
                    merged.push(format!("{}{}", pair.0, pair.1));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
            if word.len() == 1 {
                break;
            }
        }
        word
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = vec![self.sot];
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_table[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                let id = self.encoder.get(&piece).ok_or_else(|| {
                    Error::InvalidArgument(format!("token `{piece}` missing from vocabulary"))
                })?;
                ids.push(*id);
            }
        }
        ids.push(self.eot);
        Ok(ids)
    }
}
