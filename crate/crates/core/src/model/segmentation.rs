use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four token classes the attention analysis distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Sys,
    Img,
    Ins,
    Res,
}

impl SegmentKind {
    /// Fixed feature ordering: sys, img, ins, res.
    pub fn index(self) -> usize {
        match self {
            SegmentKind::Sys => 0,
            SegmentKind::Img => 1,
            SegmentKind::Ins => 2,
            SegmentKind::Res => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::Sys => "sys",
            SegmentKind::Img => "img",
            SegmentKind::Ins => "ins",
            SegmentKind::Res => "res",
        }
    }
}

/// Contiguous spans tagging each position as sys / img / ins / res.
/// sys, img and ins appear at most once each, in that order; the res span
/// grows by one position per generation step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSegmentation {
    spans: Vec<(SegmentKind, usize, usize)>,
}

impl TokenSegmentation {
    pub fn new(spans: Vec<(SegmentKind, usize, usize)>) -> Result<Self> {
        let mut cursor = 0;
        let mut last_prompt_rank = -1i32;
        let mut res_seen = false;
        for &(kind, start, end) in &spans {
            if start != cursor || end < start {
                return Err(Error::Config(format!(
                    "segments must be contiguous from 0: span ({:?}, {start}, {end}) at cursor {cursor}",
                    kind
                )));
            }
            match kind {
                SegmentKind::Res => res_seen = true,
                prompt_kind => {
                    if res_seen {
                        return Err(Error::Config("prompt segment after res".into()));
                    }
                    let rank = prompt_kind.index() as i32;
                    if rank <= last_prompt_rank {
                        return Err(Error::Config(
                            "sys, img, ins must appear at most once, in order".into(),
                        ));
                    }
                    last_prompt_rank = rank;
                }
            }
            cursor = end;
        }
        Ok(TokenSegmentation { spans })
    }

    /// Prompt layout used by the synthetic tasks. Zero-length segments are
    /// omitted, except img which must be present.
    pub fn prompt(n_sys: usize, n_img: usize, n_ins: usize) -> Result<Self> {
        if n_img == 0 {
            return Err(Error::Config("prompt needs at least one visual token".into()));
        }
        let mut spans = Vec::new();
        let mut cursor = 0;
        for (kind, len) in [
            (SegmentKind::Sys, n_sys),
            (SegmentKind::Img, n_img),
            (SegmentKind::Ins, n_ins),
        ] {
            if len > 0 {
                spans.push((kind, cursor, cursor + len));
                cursor += len;
            }
        }
        TokenSegmentation::new(spans)
    }

    pub fn spans(&self) -> &[(SegmentKind, usize, usize)] {
        &self.spans
    }

    pub fn seq_len(&self) -> usize {
        self.spans.last().map(|&(_, _, end)| end).unwrap_or(0)
    }

    /// Extend the res span by one position (the token just generated).
    pub fn push_response(&mut self) {
        let len = self.seq_len();
        match self.spans.last_mut() {
            Some((SegmentKind::Res, _, end)) => *end += 1,
            _ => self.spans.push((SegmentKind::Res, len, len + 1)),
        }
    }

    pub fn kind_at(&self, pos: usize) -> Option<SegmentKind> {
        self.spans
            .iter()
            .find(|&&(_, start, end)| pos >= start && pos < end)
            .map(|&(kind, _, _)| kind)
    }

    /// Positions of the visual segment, empty when there is none.
    pub fn visual_range(&self) -> std::ops::Range<usize> {
        self.spans
            .iter()
            .find(|&&(kind, _, _)| kind == SegmentKind::Img)
            .map(|&(_, start, end)| start..end)
            .unwrap_or(0..0)
    }

    pub fn segment_len(&self, kind: SegmentKind) -> usize {
        self.spans
            .iter()
            .filter(|&&(k, _, _)| k == kind)
            .map(|&(_, s, e)| e - s)
            .sum()
    }
}
