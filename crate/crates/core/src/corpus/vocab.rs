use std::fmt;

use super::CorpusError;

/// Decoder task selector, emitted as the first prefix token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Asr,
    St,
    Mt,
}

/// Source language index, or the shared target language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Lang(pub u16);

impl Lang {
    /// Every pair translates into this language.
    pub const TARGET: Lang = Lang(u16::MAX);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Lang::TARGET {
            write!(f, "en")
        } else {
            write!(f, "l{}", self.0)
        }
    }
}

impl std::str::FromStr for Lang {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "en" {
            return Ok(Lang::TARGET);
        }
        s.strip_prefix('l')
            .and_then(|n| n.parse::<u16>().ok())
            .filter(|&n| n != u16::MAX)
            .map(Lang)
            .ok_or_else(|| CorpusError::Format(format!("bad language tag {s:?}")))
    }
}

/// Token id layout: specials, then one tag per source language, then content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    n_content: usize,
    n_langs: usize,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const MASK: usize = 3;
    pub const SILENCE: usize = 4;
    pub const ASR: usize = 5;
    pub const ST: usize = 6;
    pub const MT: usize = 7;
    pub const N_SPECIALS: usize = 8;

    /// `limit` caps the total size (e.g. a fixed model vocabulary).
    pub fn new(n_content: usize, n_langs: usize, limit: Option<usize>) -> Result<Self, CorpusError> {
        if n_content < 2 {
            return Err(CorpusError::Config(format!("n_content {n_content} must be at least 2")));
        }
        if n_langs < 1 {
            return Err(CorpusError::Config("n_langs must be at least 1".into()));
        }
        if n_langs >= u16::MAX as usize {
            return Err(CorpusError::Config(format!("n_langs {n_langs} too large")));
        }
        let v = Vocab { n_content, n_langs };
        if let Some(limit) = limit {
            if v.size() > limit {
                return Err(CorpusError::Config(format!(
                    "vocabulary of {} exceeds configured size {limit}",
                    v.size()
                )));
            }
        }
        Ok(v)
    }

    pub fn size(&self) -> usize {
        Self::N_SPECIALS + self.n_langs + self.n_content
    }

    pub fn n_content(&self) -> usize {
        self.n_content
    }

    pub fn n_langs(&self) -> usize {
        self.n_langs
    }

    pub fn task(&self, task: Task) -> usize {
        match task {
            Task::Asr => Self::ASR,
            Task::St => Self::ST,
            Task::Mt => Self::MT,
        }
    }

    pub fn lang(&self, lang: Lang) -> usize {
        debug_assert!(lang.index() < self.n_langs);
        Self::N_SPECIALS + lang.index()
    }

    /// Token id of content index `c`.
    pub fn content(&self, c: usize) -> usize {
        debug_assert!(c < self.n_content);
        Self::N_SPECIALS + self.n_langs + c
    }

    /// Content index of a token, if it is a content token.
    pub fn content_index(&self, id: usize) -> Option<usize> {
        let first = Self::N_SPECIALS + self.n_langs;
        (first..first + self.n_content).contains(&id).then(|| id - first)
    }

    pub fn is_content(&self, id: usize) -> bool {
        self.content_index(id).is_some()
    }

    /// Decoder prefix `[task tag, source-language tag]`.
    pub fn prefix(&self, task: Task, src: Lang) -> [usize; 2] {
        [self.task(task), self.lang(src)]
    }
}
