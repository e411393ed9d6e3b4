//! Task templates: mixed text and audio-patch token streams with a loss
//! span.
//!
//! The `<loss>` and `</loss>` delimiters of a template are not stream
//! tokens; they become the loss mask.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dsp::corpus::N_SYMBOLS;
use crate::error::{Error, Result};

/// Text vocabulary: transcript symbols followed by the two class words.
pub const TEXT_VOCAB: usize = N_SYMBOLS + 2;

/// Special markers, with ids reserved above the text vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Text,
    Speech,
    TextToSpeech,
    SpeechToText,
    Desc,
    Eos,
}

impl Marker {
    pub const ALL: [Marker; 6] = [Marker::Text, Marker::Speech, Marker::TextToSpeech, Marker::SpeechToText, Marker::Desc, Marker::Eos];

    pub fn id(self) -> usize {
        TEXT_VOCAB + Marker::ALL.iter().position(|&m| m == self).unwrap()
    }

    pub fn label(self) -> &'static str {
        match self {
            Marker::Text => "[text]",
            Marker::Speech => "[speech]",
            Marker::TextToSpeech => "[text2speech]",
            Marker::SpeechToText => "[speech2text]",
            Marker::Desc => "[desc]",
            Marker::Eos => "<eos>",
        }
    }
}

/// Size of the token vocabulary (text and markers).
pub const VOCAB: usize = TEXT_VOCAB + Marker::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutTask {
    Tts,
    Asr,
    DescTts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Text(u32),
    Marker(Marker),
    /// Audio patch by index.
    Audio(usize),
}

impl Token {
    /// Embedding id; audio patches have none.
    pub fn id(self) -> Option<usize> {
        match self {
            Token::Text(t) => Some(t as usize),
            Token::Marker(m) => Some(m.id()),
            Token::Audio(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    pub task: LayoutTask,
    pub tokens: Vec<Token>,
    /// True inside the loss span.
    pub loss: Vec<bool>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Stream position of every audio patch, in patch order.
    pub fn audio_positions(&self) -> Vec<usize> {
        self.tokens.iter().enumerate().filter(|(_, t)| matches!(t, Token::Audio(_))).map(|(i, _)| i).collect()
    }

    /// Next-token targets: `targets[i]` is the id predicted from position
    /// `i`, present only where position `i + 1` is a text or `<eos>` token
    /// inside the loss span.
    pub fn text_targets(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        for i in 1..self.len() {
            if self.loss[i] {
                if let Some(id) = self.tokens[i].id() {
                    out[i - 1] = Some(id);
                }
            }
        }
        out
    }

    /// Human-readable token trace; loss-span tokens are starred.
    pub fn trace(&self) -> String {
        let mut s = String::new();
        for (t, &l) in self.tokens.iter().zip(&self.loss) {
            if !s.is_empty() {
                s.push(' ');
            }
            match t {
                Token::Text(v) => write!(s, "t{v}").unwrap(),
                Token::Marker(m) => s.push_str(m.label()),
                Token::Audio(k) => write!(s, "a{k}").unwrap(),
            }
            if l {
                s.push('*');
            }
        }
        s
    }
}

fn check_text(name: &str, text: &[u32]) -> Result<()> {
    if text.is_empty() {
        return Err(Error::invalid(format!("{name} layout requires non-empty text")));
    }
    if let Some(&bad) = text.iter().find(|&&v| v as usize >= TEXT_VOCAB) {
        return Err(Error::invalid(format!("text symbol {bad} outside the vocabulary of {TEXT_VOCAB}")));
    }
    Ok(())
}

struct Builder {
    tokens: Vec<Token>,
    loss: Vec<bool>,
}

impl Builder {
    fn push(&mut self, t: Token, loss: bool) {
        self.tokens.push(t);
        self.loss.push(loss);
    }

    fn text(&mut self, text: &[u32], loss: bool) {
        text.iter().for_each(|&v| self.push(Token::Text(v), loss));
    }

    fn audio(&mut self, k: usize, loss: bool) {
        (0..k).for_each(|i| self.push(Token::Audio(i), loss));
    }
}

/// Builds a template layout.
///
/// - tts: `[text] t [text2speech] <loss> a <eos> </loss>`
/// - asr: `[speech] a [speech2text] <loss> t <eos> </loss>`
/// - desc_tts: `[desc] d` followed by the tts layout
pub fn build_layout(task: LayoutTask, text: &[u32], patches: usize, desc: &[u32]) -> Result<SequenceLayout> {
    check_text("text", text)?;
    if patches == 0 {
        return Err(Error::invalid("layout requires at least one audio patch"));
    }
    let mut b = Builder { tokens: Vec::new(), loss: Vec::new() };
    match task {
        LayoutTask::Asr => {
            b.push(Token::Marker(Marker::Speech), false);
            b.audio(patches, false);
            b.push(Token::Marker(Marker::SpeechToText), false);
            b.text(text, true);
        }
        LayoutTask::Tts | LayoutTask::DescTts => {
            if task == LayoutTask::DescTts {
                check_text("description", desc)?;
                b.push(Token::Marker(Marker::Desc), false);
                b.text(desc, false);
            }
            b.push(Token::Marker(Marker::Text), false);
            b.text(text, false);
            b.push(Token::Marker(Marker::TextToSpeech), false);
            b.audio(patches, true);
        }
    }
    b.push(Token::Marker(Marker::Eos), true);
    Ok(SequenceLayout { task, tokens: b.tokens, loss: b.loss })
}

/// Prompt of a generation: the template up to its task marker.
pub fn prompt(task: LayoutTask, text: &[u32], patches: usize, desc: &[u32]) -> Result<SequenceLayout> {
    let mut l = build_layout(task, text, patches.max(1), desc)?;
    let cut = l.loss.iter().position(|&m| m).expect("every template has a loss span");
    l.tokens.truncate(cut);
    l.loss.truncate(cut);
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_arithmetic() {
        let tts = build_layout(LayoutTask::Tts, &[1, 2, 3], 2, &[]).unwrap();
        // three markers: [text], [text2speech], <eos>
        assert_eq!(tts.len(), 3 + 2 + 3);
        assert_eq!(tts.trace(), "[text] t1 t2 t3 [text2speech] a0* a1* <eos>*");
        assert_eq!(tts.loss.iter().filter(|&&m| m).count(), 3);

        let asr = build_layout(LayoutTask::Asr, &[4, 5], 3, &[]).unwrap();
        assert_eq!(asr.trace(), "[speech] a0 a1 a2 [speech2text] t4* t5* <eos>*");
        let t = asr.text_targets();
        assert_eq!(t.iter().flatten().copied().collect::<Vec<_>>(), vec![4, 5, Marker::Eos.id()]);
        assert_eq!(t[4], Some(4));

        let desc = build_layout(LayoutTask::DescTts, &[1, 2, 3], 2, &[16]).unwrap();
        assert_eq!(&desc.tokens[..2], &[Token::Marker(Marker::Desc), Token::Text(16)]);
        assert_eq!(&desc.tokens[2..], &tts.tokens[..]);
        assert_eq!(&desc.loss[2..], &tts.loss[..]);

        let count = |l: &SequenceLayout| {
            l.tokens.iter().filter(|t| matches!(t, Token::Marker(Marker::TextToSpeech | Marker::SpeechToText))).count()
        };
        assert_eq!((count(&tts), count(&asr), count(&desc)), (1, 1, 1));
    }

    #[test]
    fn rejects_empty_parts_and_reserves_ids() {
        assert!(build_layout(LayoutTask::Tts, &[], 2, &[]).is_err());
        assert!(build_layout(LayoutTask::Asr, &[1], 0, &[]).is_err());
        assert!(build_layout(LayoutTask::DescTts, &[1], 1, &[]).is_err());
        assert!(build_layout(LayoutTask::Tts, &[TEXT_VOCAB as u32], 1, &[]).is_err());
        assert!(Marker::ALL.iter().all(|m| m.id() >= TEXT_VOCAB && m.id() < VOCAB));
        let p = prompt(LayoutTask::Tts, &[1, 2], 4, &[]).unwrap();
        assert_eq!(p.trace(), "[text] t1 t2 [text2speech]");
    }
}
