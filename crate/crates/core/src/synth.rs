//! Deterministic synthetic temporal-grounding data.
//!
//! A video is a row of time bins, each holding one event class (class 0 is
//! background). Each sample carries a grounding query in three variants:
//! the original template, a rephrased template naming the same class, and a
//! shifted video in which the queried event is translated to another
//! position. Two-event samples also carry eight logically equivalent
//! event-order questions.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn::{EventSpan, TokenLayout};
use crate::error::{LabError, Result};

/// Number of query-side tokens of the longest prompt (event-order question).
pub const MAX_TEXT_TOKENS: usize = 5;

/// Descriptor tokens per event mention.
pub const DESC_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_bins: usize,
    pub num_event_classes: usize,
    pub events_per_video: usize,
    pub min_event_len: usize,
    pub max_event_len: usize,
    /// Query templates per class; the rephrased variant uses a different one.
    pub num_templates: usize,
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_bins: 12,
            num_event_classes: 6,
            events_per_video: 2,
            min_event_len: 2,
            max_event_len: 4,
            num_templates: 2,
            seed: 7,
            train_size: 1000,
            eval_size: 200,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(LabError::InfeasibleSpec(m));
        if !(1..=2).contains(&self.events_per_video) {
            return fail(format!("events_per_video = {} (must be 1 or 2)", self.events_per_video));
        }
        if self.num_event_classes < self.events_per_video {
            return fail("fewer event classes than events per video".into());
        }
        if self.num_templates < 2 {
            return fail("need at least two templates so rephrasing changes the query".into());
        }
        if self.min_event_len == 0 || self.min_event_len > self.max_event_len {
            return fail(format!(
                "event length range [{}, {}]",
                self.min_event_len, self.max_event_len
            ));
        }
        // room for all events plus one free placement of the queried event
        if self.events_per_video * self.max_event_len + self.max_event_len > self.num_bins {
            return fail(format!(
                "{} events of up to {} bins do not fit (with room to shift) in {} bins",
                self.events_per_video, self.max_event_len, self.num_bins
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_bins, self.num_event_classes, self.num_templates)
    }
}

/// Token id ranges.
///
/// ```text
/// [bins | yes no | visual classes (0 = background) | ground templates |
///  descriptors (class, template, DESC_TOKENS) | before after]
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_bins: usize,
    pub num_classes: usize,
    pub num_templates: usize,
}

impl Vocab {
    pub fn new(num_bins: usize, num_classes: usize, num_templates: usize) -> Self {
        Vocab {
            num_bins,
            num_classes,
            num_templates,
        }
    }

    pub fn bin(&self, b: usize) -> usize {
        b
    }

    pub fn yes(&self) -> usize {
        self.num_bins
    }

    pub fn no(&self) -> usize {
        self.num_bins + 1
    }

    /// Visual token for an event class; class 0 is background.
    pub fn visual(&self, class: usize) -> usize {
        self.num_bins + 2 + class
    }

    pub fn ground(&self, template: usize) -> usize {
        self.visual(self.num_classes + 1) + template
    }

    /// Descriptor tokens of a class (1-based) under a template.
    pub fn descriptor(&self, class: usize, template: usize) -> [usize; DESC_TOKENS] {
        let base = self.ground(self.num_templates)
            + ((class - 1) * self.num_templates + template) * DESC_TOKENS;
        std::array::from_fn(|i| base + i)
    }

    pub fn before(&self) -> usize {
        self.ground(self.num_templates) + self.num_classes * self.num_templates * DESC_TOKENS
    }

    pub fn after(&self) -> usize {
        self.before() + 1
    }

    pub fn size(&self) -> usize {
        self.after() + 1
    }

    pub fn is_bin(&self, token: usize) -> bool {
        token < self.num_bins
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub class: usize,
    pub start_bin: usize,
    pub end_bin: usize,
}

impl Event {
    pub fn len(&self) -> usize {
        self.end_bin - self.start_bin + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingQuery {
    pub template: usize,
    pub tokens: Vec<usize>,
    pub start_bin: usize,
    pub end_bin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedQuery {
    pub video: Vec<usize>,
    pub offset: i64,
    pub tokens: Vec<usize>,
    pub start_bin: usize,
    pub end_bin: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Before,
    After,
}

/// "Does event `first` happen `relation` event `second`?"
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EojQuestion {
    pub template: usize,
    pub first: usize,
    pub second: usize,
    pub relation: Relation,
    pub tokens: Vec<usize>,
    pub answer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub index: usize,
    /// Event class per time bin.
    pub video: Vec<usize>,
    pub events: Vec<Event>,
    /// Index into `events` of the grounded event.
    pub query_event: usize,
    pub original: GroundingQuery,
    pub rephrased: GroundingQuery,
    pub shifted: ShiftedQuery,
    pub eoj: Option<Vec<EojQuestion>>,
}

/// Which grounding variant to build a prompt for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    Rephrased,
    Shifted,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Original, Variant::Rephrased, Variant::Shifted];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Rephrased => "rephrased",
            Variant::Shifted => "shifted",
        }
    }
}

/// Token ids of a model input with its role layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub layout: TokenLayout,
}

/// Event id used in layouts for the `i`-th event of a sample.
fn event_id(i: usize) -> usize {
    i
}

impl GroundingSample {
    pub fn query_span(&self, variant: Variant) -> EventSpan {
        let (s, e) = match variant {
            Variant::Original => (self.original.start_bin, self.original.end_bin),
            Variant::Rephrased => (self.rephrased.start_bin, self.rephrased.end_bin),
            Variant::Shifted => (self.shifted.start_bin, self.shifted.end_bin),
        };
        EventSpan {
            event: event_id(self.query_event),
            start_bin: s,
            end_bin: e,
        }
    }

    fn variant_parts(&self, variant: Variant) -> (&[usize], &[usize]) {
        match variant {
            Variant::Original => (&self.video, &self.original.tokens),
            Variant::Rephrased => (&self.video, &self.rephrased.tokens),
            Variant::Shifted => (&self.shifted.video, &self.shifted.tokens),
        }
    }

    /// Video tokens followed by the query (and any `answer` tokens already
    /// emitted). Descriptor tokens are tagged with the queried event; the
    /// template and answer tokens are untagged text.
    pub fn grounding_prompt(&self, vocab: &Vocab, variant: Variant, answer: &[usize]) -> Result<Prompt> {
        let (video, query) = self.variant_parts(variant);
        let mut text_events = vec![None];
        text_events.extend(std::iter::repeat_n(Some(event_id(self.query_event)), query.len() - 1));
        text_events.extend(std::iter::repeat_n(None, answer.len()));
        let mut tokens: Vec<usize> = video.iter().map(|&c| vocab.visual(c)).collect();
        tokens.extend_from_slice(query);
        tokens.extend_from_slice(answer);
        let layout = TokenLayout::video_then_text(video.len(), &text_events)?;
        Ok(Prompt { tokens, layout })
    }

    /// Prompt for one event-order question.
    pub fn eoj_prompt(&self, vocab: &Vocab, q: &EojQuestion) -> Result<Prompt> {
        let mut tokens: Vec<usize> = self.video.iter().map(|&c| vocab.visual(c)).collect();
        tokens.extend_from_slice(&q.tokens);
        let mut text_events = vec![None];
        text_events.extend(std::iter::repeat_n(Some(event_id(q.first)), DESC_TOKENS));
        text_events.extend(std::iter::repeat_n(Some(event_id(q.second)), DESC_TOKENS));
        let layout = TokenLayout::video_then_text(self.video.len(), &text_events)?;
        Ok(Prompt { tokens, layout })
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

const MAX_PLACEMENT_TRIES: usize = 1000;

/// Generates sample `index`; fully determined by `(spec.seed, index)`.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> Result<GroundingSample> {
    spec.validate()?;
    let vocab = spec.vocab();
    let mut rng = sample_rng(spec.seed, index);

    let mut classes: Vec<usize> = (1..=spec.num_event_classes).collect();
    classes.shuffle(&mut rng);
    classes.truncate(spec.events_per_video);

    let mut events: Vec<Event> = Vec::new();
    for &class in &classes {
        let len = rng.gen_range(spec.min_event_len..=spec.max_event_len);
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let start = rng.gen_range(0..=spec.num_bins - len);
            let span = (start, start + len - 1);
            if events.iter().all(|e| !overlaps(span, (e.start_bin, e.end_bin))) {
                events.push(Event {
                    class,
                    start_bin: span.0,
                    end_bin: span.1,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(LabError::InfeasibleSpec(format!(
                "could not place event of length {len} in sample {index}"
            )));
        }
    }
    let video = paint(spec.num_bins, &events);

    let query_event = rng.gen_range(0..events.len());
    let target = events[query_event];
    let ori_t = rng.gen_range(0..spec.num_templates);
    let reph_t = (ori_t + rng.gen_range(1..spec.num_templates)) % spec.num_templates;
    let query = |t: usize| -> Vec<usize> {
        let mut q = vec![vocab.ground(t)];
        q.extend(vocab.descriptor(target.class, t));
        q
    };
    let original = GroundingQuery {
        template: ori_t,
        tokens: query(ori_t),
        start_bin: target.start_bin,
        end_bin: target.end_bin,
    };
    let rephrased = GroundingQuery {
        template: reph_t,
        tokens: query(reph_t),
        start_bin: target.start_bin,
        end_bin: target.end_bin,
    };

    // Shifted: move the queried event to another free position.
    let len = target.len();
    let feasible: Vec<usize> = (0..=spec.num_bins - len)
        .filter(|&s| s != target.start_bin)
        .filter(|&s| {
            events
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != query_event)
                .all(|(_, e)| !overlaps((s, s + len - 1), (e.start_bin, e.end_bin)))
        })
        .collect();
    if feasible.is_empty() {
        return Err(LabError::InfeasibleSpec(format!(
            "no free position to shift the event of sample {index}"
        )));
    }
    let new_start = feasible[rng.gen_range(0..feasible.len())];
    let mut shifted_events = events.clone();
    shifted_events[query_event].start_bin = new_start;
    shifted_events[query_event].end_bin = new_start + len - 1;
    let shifted = ShiftedQuery {
        video: paint(spec.num_bins, &shifted_events),
        offset: new_start as i64 - target.start_bin as i64,
        tokens: original.tokens.clone(),
        start_bin: new_start,
        end_bin: new_start + len - 1,
    };

    let eoj = (events.len() == 2).then(|| eoj_questions(&vocab, &events, spec.num_templates));

    Ok(GroundingSample {
        index,
        video,
        events,
        query_event,
        original,
        rephrased,
        shifted,
        eoj,
    })
}

fn paint(num_bins: usize, events: &[Event]) -> Vec<usize> {
    let mut video = vec![0; num_bins];
    for e in events {
        video[e.start_bin..=e.end_bin].fill(e.class);
    }
    video
}

/// Eight questions: both mention orders × both relations × two templates.
fn eoj_questions(vocab: &Vocab, events: &[Event], num_templates: usize) -> Vec<EojQuestion> {
    let zero_before_one = events[0].end_bin < events[1].start_bin;
    let mut out = Vec::with_capacity(8);
    for template in 0..num_templates.min(2) {
        for (first, second) in [(0, 1), (1, 0)] {
            for relation in [Relation::Before, Relation::After] {
                let first_is_earlier = (first == 0) == zero_before_one;
                let answer = match relation {
                    Relation::Before => first_is_earlier,
                    Relation::After => !first_is_earlier,
                };
                let mut tokens = vec![match relation {
                    Relation::Before => vocab.before(),
                    Relation::After => vocab.after(),
                }];
                tokens.extend(vocab.descriptor(events[first].class, template));
                tokens.extend(vocab.descriptor(events[second].class, template));
                out.push(EojQuestion {
                    template,
                    first,
                    second,
                    relation,
                    tokens,
                    answer,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<GroundingSample>,
    pub eval: Vec<GroundingSample>,
}

/// Train indices are `0..train_size`, eval indices follow them.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.train_size == 0 || spec.eval_size == 0 {
        return Err(LabError::Empty("dataset split"));
    }
    let train = (0..spec.train_size)
        .map(|i| generate_sample(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let eval = (spec.train_size..spec.train_size + spec.eval_size)
        .map(|i| generate_sample(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { train, eval })
}

/// One sample per line, fields in declaration order.
pub fn write_jsonl<W: Write>(samples: &[GroundingSample], sink: &mut W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut *sink, s)?;
        sink.write_all(b"\n")
            .map_err(|e| LabError::io("<jsonl sink>", e))?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<GroundingSample>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(LabError::from))
        .collect()
}
