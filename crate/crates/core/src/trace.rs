//! Stack-trace extraction from free-form bug-report text.
//!
//! Two dialects are recognised:
//!
//! - **Eclipse**: Java exception traces (`at pkg.Class.method(File.java:12)`),
//!   optionally chained through `Caused by:` sections.
//! - **Gnome**: gdb backtraces (`#3  0xdeadbeef in g_main_loop_run (loop=0x1) from /usr/lib/libglib.so`).
//!
//! A trace is a maximal run of frame lines. Anything that is not a frame (or
//! one of the few dialect-specific continuation lines) closes the current run.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static ECLIPSE_FRAME: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^\s*at\s+(?P<func>[A-Za-z_$<][\w$<>/-]*(?:\.[\w$<>/-]+)+)\s*\((?P<src>[^()]*)\)\s*(?:~?\[[^\]]*\]\s*)?$",
    )
    .unwrap()
});
static ECLIPSE_CAUSED_BY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*Caused by:\s*\S").unwrap());
static ECLIPSE_MORE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*\.\.\.\s*\d+\s+(?:more|common frames omitted)\s*$").unwrap());

static GNOME_FRAME_START: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*#(?P<num>\d+)\s+(?P<rest>\S.*?)\s*$").unwrap());
static GNOME_FRAME_BODY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^(?:(?P<addr>0x[0-9a-fA-F]+)\s+in\s+)?(?P<func>[^\s()]+)\s*\((?P<args>.*)\)(?:\s+(?:from|at)\s+(?P<src>\S+))?$",
    )
    .unwrap()
});
static GNOME_LOCALS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:\s+[\w.$\[\]]+ = .*|\s*No symbol table info available\.?|\s*No locals\.)\s*$")
        .unwrap()
});
static GNOME_LOCATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s+(?:at|from)\s+\S+\s*$").unwrap());
static HAS_LOCATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\)\s+(?:at|from)\s+\S+$").unwrap());

/// Maximum number of physical lines a single wrapped gdb frame may span.
const GNOME_MAX_WRAP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dialect {
    Eclipse,
    Gnome,
}

impl Dialect {
    pub fn as_str(self) -> &'static str {
        match self {
            Dialect::Eclipse => "eclipse",
            Dialect::Gnome => "gnome",
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dialect {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "eclipse" | "java" => Ok(Dialect::Eclipse),
            "gnome" | "gdb" => Ok(Dialect::Gnome),
            other => Err(format!("unknown dialect {other:?} (expected eclipse or gnome)")),
        }
    }
}

/// One bug report as it arrives in the input JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawBugReport {
    pub id: String,
    #[serde(default)]
    pub text: String,
    /// Field name to "was this field reassigned".
    #[serde(default)]
    pub labels: BTreeMap<String, bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub function: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}

impl Frame {
    pub fn new(function: impl Into<String>) -> Self {
        Frame {
            function: function.into(),
            source: None,
            position: None,
        }
    }

    /// Render the frame as a canonical line of the given dialect.
    pub fn to_line(&self, dialect: Dialect) -> String {
        match dialect {
            Dialect::Eclipse => format!(
                "\tat {}({})",
                self.function,
                self.source.as_deref().unwrap_or("Unknown Source")
            ),
            Dialect::Gnome => {
                let mut line = format!(
                    "#{}  0x00000000 in {} ()",
                    self.position.unwrap_or(0),
                    self.function
                );
                if let Some(src) = &self.source {
                    line.push_str(" from ");
                    line.push_str(src);
                }
                line
            }
        }
    }
}

/// Ordered call frames, top of stack first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackTrace {
    pub report_id: String,
    pub frames: Vec<Frame>,
    pub dialect: Dialect,
}

impl StackTrace {
    pub fn function_names(&self) -> impl Iterator<Item = &str> {
        self.frames.iter().map(|f| f.function.as_str())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TracePolicy {
    /// Keep only the first trace found in the report.
    #[default]
    First,
    /// Concatenate every trace in textual order.
    Concat,
}

impl FromStr for TracePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "first" => Ok(TracePolicy::First),
            "concat" => Ok(TracePolicy::Concat),
            other => Err(format!("unknown trace policy {other:?} (expected first or concat)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractOptions {
    /// Append `Caused by:` sections to the trace they follow (Eclipse only).
    pub follow_caused_by: bool,
    /// Keep at most this many top-of-stack frames per trace.
    pub max_frames: Option<usize>,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            follow_caused_by: true,
            max_frames: None,
        }
    }
}

/// Classification of one logical input line.
enum Line {
    Frame(Frame),
    /// A frame line whose symbol could not be resolved (`??`, signal handler).
    Unresolved(Option<usize>),
    /// Text that belongs to a trace without contributing a frame.
    Continuation,
    CausedBy,
    Other,
}

#[derive(Clone, Debug)]
pub struct Extractor {
    dialect: Dialect,
    options: ExtractOptions,
}

impl Extractor {
    pub fn new(dialect: Dialect) -> Self {
        Extractor {
            dialect,
            options: ExtractOptions::default(),
        }
    }

    pub fn with_options(mut self, options: ExtractOptions) -> Self {
        self.options = options;
        self
    }

    pub fn dialect(&self) -> Dialect {
        self.dialect
    }

    /// Extract every trace in `text`, in order of appearance.
    pub fn extract(&self, text: &str) -> Vec<StackTrace> {
        self.extract_with_id("", text)
    }

    pub fn extract_report(&self, report: &RawBugReport) -> Vec<StackTrace> {
        self.extract_with_id(&report.id, &report.text)
    }

    fn extract_with_id(&self, report_id: &str, text: &str) -> Vec<StackTrace> {
        let text = decode_entities(text);
        let lines: Vec<&str> = text.lines().collect();

        let mut traces = Vec::new();
        let mut current: Vec<Frame> = Vec::new();
        // Whether the previous logical line was part of an open trace. Needed
        // because a run may consist solely of dropped (unresolved) frames.
        let mut open = false;
        let mut last_position: Option<usize> = None;

        let mut flush = |current: &mut Vec<Frame>, open: &mut bool, last: &mut Option<usize>| {
            if !current.is_empty() {
                let mut frames = std::mem::take(current);
                if let Some(cap) = self.options.max_frames {
                    frames.truncate(cap);
                }
                traces.push(StackTrace {
                    report_id: report_id.to_string(),
                    frames,
                    dialect: self.dialect,
                });
            }
            *open = false;
            *last = None;
        };

        let mut i = 0;
        while i < lines.len() {
            let (line, consumed) = self.classify(&lines, i);
            i += consumed;
            match line {
                Line::Frame(mut frame) => {
                    if self.dialect == Dialect::Gnome {
                        if let (Some(prev), Some(pos)) = (last_position, frame.position) {
                            if pos <= prev {
                                flush(&mut current, &mut open, &mut last_position);
                            }
                        }
                        last_position = frame.position;
                    } else {
                        frame.position = Some(current.len());
                    }
                    current.push(frame);
                    open = true;
                }
                Line::Unresolved(pos) => {
                    if let (Some(prev), Some(pos)) = (last_position, pos) {
                        if pos <= prev {
                            flush(&mut current, &mut open, &mut last_position);
                        }
                    }
                    if pos.is_some() {
                        last_position = pos;
                    }
                    open = true;
                }
                Line::Continuation => {}
                Line::CausedBy => {
                    if !(open && self.options.follow_caused_by) {
                        flush(&mut current, &mut open, &mut last_position);
                    }
                }
                Line::Other => flush(&mut current, &mut open, &mut last_position),
            }
        }
        flush(&mut current, &mut open, &mut last_position);
        traces
    }

    /// Classify the logical line starting at `lines[i]`, returning how many
    /// physical lines it spans.
    fn classify(&self, lines: &[&str], i: usize) -> (Line, usize) {
        let line = lines[i];
        match self.dialect {
            Dialect::Eclipse => {
                if let Some(frame) = parse_eclipse(line) {
                    (Line::Frame(frame), 1)
                } else if ECLIPSE_MORE.is_match(line) {
                    (Line::Continuation, 1)
                } else if ECLIPSE_CAUSED_BY.is_match(line) {
                    (Line::CausedBy, 1)
                } else {
                    (Line::Other, 1)
                }
            }
            Dialect::Gnome => {
                if !GNOME_FRAME_START.is_match(line) {
                    let kind = if GNOME_LOCALS.is_match(line) {
                        Line::Continuation
                    } else {
                        Line::Other
                    };
                    return (kind, 1);
                }
                // gdb wraps long argument lists onto indented follow-up lines.
                let mut joined = line.trim_end().to_string();
                let mut consumed = 1;
                while paren_balance(&joined) > 0
                    && consumed < GNOME_MAX_WRAP
                    && i + consumed < lines.len()
                    && lines[i + consumed].starts_with(char::is_whitespace)
                    && !GNOME_FRAME_START.is_match(lines[i + consumed])
                {
                    joined.push(' ');
                    joined.push_str(lines[i + consumed].trim());
                    consumed += 1;
                }
                // ... and sometimes puts the location on a line of its own.
                if paren_balance(&joined) == 0
                    && !HAS_LOCATION.is_match(&joined)
                    && i + consumed < lines.len()
                    && GNOME_LOCATION.is_match(lines[i + consumed])
                {
                    joined.push(' ');
                    joined.push_str(lines[i + consumed].trim());
                    consumed += 1;
                }
                let parsed = match parse_gnome(&joined) {
                    Ok(frame) => Line::Frame(frame),
                    Err(position) => Line::Unresolved(position),
                };
                (parsed, consumed)
            }
        }
    }
}

/// Extract traces with default options.
pub fn extract_traces(text: &str, dialect: Dialect) -> Vec<StackTrace> {
    Extractor::new(dialect).extract(text)
}

/// Parse a single frame line into its canonical [`Frame`].
pub fn normalize_frame(raw_line: &str, dialect: Dialect) -> Result<Frame> {
    match dialect {
        Dialect::Eclipse => parse_eclipse(raw_line).ok_or_else(|| Error::NonFrameLine {
            dialect: dialect.as_str(),
            line: raw_line.to_string(),
        }),
        Dialect::Gnome => {
            if !GNOME_FRAME_START.is_match(raw_line) {
                return Err(Error::NonFrameLine {
                    dialect: dialect.as_str(),
                    line: raw_line.to_string(),
                });
            }
            parse_gnome(raw_line).map_err(|_| Error::UnresolvedSymbol {
                line: raw_line.to_string(),
            })
        }
    }
}

pub fn select_trace(traces: Vec<StackTrace>, policy: TracePolicy) -> Option<StackTrace> {
    let mut iter = traces.into_iter();
    let first = iter.next()?;
    match policy {
        TracePolicy::First => Some(first),
        TracePolicy::Concat => {
            let mut merged = first;
            for trace in iter {
                merged.frames.extend(trace.frames);
            }
            for (i, frame) in merged.frames.iter_mut().enumerate() {
                frame.position = Some(i);
            }
            Some(merged)
        }
    }
}

fn parse_eclipse(line: &str) -> Option<Frame> {
    let caps = ECLIPSE_FRAME.captures(line)?;
    let src = caps["src"].trim();
    let source = match src.split_once(':') {
        Some((file, _line)) => Some(file.trim()),
        None => Some(src),
    }
    .filter(|s| !s.is_empty() && *s != "Unknown Source" && *s != "Native Method")
    .map(str::to_string);
    Some(Frame {
        function: caps["func"].to_string(),
        source,
        position: None,
    })
}

/// Parse a (joined) gdb frame line. Unresolvable frames yield their frame
/// number, if any, as the error value.
fn parse_gnome(line: &str) -> std::result::Result<Frame, Option<usize>> {
    let start = GNOME_FRAME_START.captures(line).ok_or(None)?;
    let position = start["num"].parse::<usize>().ok();
    let body = GNOME_FRAME_BODY.captures(&start["rest"]).ok_or(position)?;
    let func = &body["func"];
    if func.is_empty() || func.starts_with("??") || func.starts_with('<') {
        return Err(position);
    }
    let source = body.name("src").map(|m| {
        let src = m.as_str();
        match src.rsplit_once(':') {
            Some((file, line)) if line.chars().all(|c| c.is_ascii_digit()) => file.to_string(),
            _ => src.to_string(),
        }
    });
    Ok(Frame {
        function: func.to_string(),
        source,
        position,
    })
}

fn paren_balance(s: &str) -> i32 {
    s.chars().fold(0, |acc, c| match c {
        '(' => acc + 1,
        ')' => acc - 1,
        _ => acc,
    })
}

/// Decode the handful of HTML entities that survive copy-paste from web
/// trackers (`&lt;init&gt;` and friends).
fn decode_entities(text: &str) -> std::borrow::Cow<'_, str> {
    if !text.contains('&') {
        return std::borrow::Cow::Borrowed(text);
    }
    std::borrow::Cow::Owned(
        text.replace("&lt;", "<")
            .replace("&gt;", ">")
            .replace("&quot;", "\"")
            .replace("&#39;", "'")
            .replace("&apos;", "'")
            .replace("&nbsp;", " ")
            .replace("&amp;", "&"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(trace: &StackTrace) -> Vec<&str> {
        trace.function_names().collect()
    }

    #[test]
    fn eclipse_single_trace() {
        let text = "java.lang.NullPointerException\n\tat org.eclipse.ui.Widget.check(Widget.java:337)\n\tat org.eclipse.ui.Widget.error(Widget.java:4)";
        let traces = extract_traces(text, Dialect::Eclipse);
        assert_eq!(traces.len(), 1);
        assert_eq!(
            names(&traces[0]),
            ["org.eclipse.ui.Widget.check", "org.eclipse.ui.Widget.error"]
        );
        assert_eq!(traces[0].frames[0].source.as_deref(), Some("Widget.java"));
        assert_eq!(traces[0].frames[1].position, Some(1));
    }

    #[test]
    fn gnome_single_trace() {
        let text = "#0  0x00002b3f in gtk_widget_show (widget=0x84) from /usr/lib/libgtk.so\n#1  0x00002b40 in main () at main.c:10";
        let traces = extract_traces(text, Dialect::Gnome);
        assert_eq!(traces.len(), 1);
        assert_eq!(names(&traces[0]), ["gtk_widget_show", "main"]);
        assert_eq!(traces[0].frames[1].source.as_deref(), Some("main.c"));
        assert_eq!(traces[0].frames[1].position, Some(1));
    }

    #[test]
    fn prose_has_no_traces() {
        for dialect in [Dialect::Eclipse, Dialect::Gnome] {
            assert!(extract_traces("the button does nothing when clicked", dialect).is_empty());
        }
    }

    #[test]
    fn normalize_examples() {
        let f = normalize_frame("\tat a.b.C.m(C.java:1)", Dialect::Eclipse).unwrap();
        assert_eq!(f.function, "a.b.C.m");
        let f = normalize_frame(
            "#3  0x0000dead in g_hash_table_lookup (h=0x1) from /usr/lib/libglib.so",
            Dialect::Gnome,
        )
        .unwrap();
        assert_eq!(f.function, "g_hash_table_lookup");
        assert_eq!(f.position, Some(3));
        assert_eq!(f.source.as_deref(), Some("/usr/lib/libglib.so"));
        for dialect in [Dialect::Eclipse, Dialect::Gnome] {
            assert!(matches!(
                normalize_frame("hello world", dialect),
                Err(Error::NonFrameLine { .. })
            ));
        }
        assert!(matches!(
            normalize_frame("#2  0xb7f in ?? ()", Dialect::Gnome),
            Err(Error::UnresolvedSymbol { .. })
        ));
    }

    #[test]
    fn caused_by_is_configurable() {
        let text = "java.lang.RuntimeException: boom\n\tat a.B.c(B.java:1)\nCaused by: java.io.IOException\n\tat d.E.f(E.java:2)\n\t... 3 more";
        let joined = extract_traces(text, Dialect::Eclipse);
        assert_eq!(joined.len(), 1);
        assert_eq!(names(&joined[0]), ["a.B.c", "d.E.f"]);

        let split = Extractor::new(Dialect::Eclipse)
            .with_options(ExtractOptions {
                follow_caused_by: false,
                max_frames: None,
            })
            .extract(text);
        assert_eq!(split.len(), 2);
        assert_eq!(names(&split[1]), ["d.E.f"]);
        assert_eq!(split[1].frames[0].position, Some(0));
    }

    #[test]
    fn max_frames_keeps_top_of_stack() {
        let text = "\tat a.A.one(A.java:1)\n\tat a.A.two(A.java:2)\n\tat a.A.three(A.java:3)";
        let traces = Extractor::new(Dialect::Eclipse)
            .with_options(ExtractOptions {
                follow_caused_by: true,
                max_frames: Some(2),
            })
            .extract(text);
        assert_eq!(names(&traces[0]), ["a.A.one", "a.A.two"]);
    }

    #[test]
    fn gnome_drops_unresolved_and_joins_wrapped_args() {
        let text = "#0  0xb7f in ?? ()\n#1  <signal handler called>\n#2  0x0804a1b2 in foo (a=1,\n    b=2) at foo.c:12\n#3  0x0804a1b3 in bar () from /lib/libx.so";
        let traces = extract_traces(text, Dialect::Gnome);
        assert_eq!(traces.len(), 1);
        assert_eq!(names(&traces[0]), ["foo", "bar"]);
        assert_eq!(traces[0].frames[0].position, Some(2));
    }

    #[test]
    fn gnome_frame_number_restart_splits() {
        let text = "#0  0x1 in a () from /lib/l.so\n#1  0x2 in b () from /lib/l.so\n#0  0x3 in c () from /lib/l.so";
        let traces = extract_traces(text, Dialect::Gnome);
        assert_eq!(traces.len(), 2);
        assert_eq!(names(&traces[1]), ["c"]);
    }

    #[test]
    fn html_entities_are_decoded() {
        let text = "\tat org.x.Y.&lt;init&gt;(Y.java:3)";
        let traces = extract_traces(text, Dialect::Eclipse);
        assert_eq!(names(&traces[0]), ["org.x.Y.<init>"]);
    }

    fn trace(id: &str, fns: &[&str]) -> StackTrace {
        StackTrace {
            report_id: id.into(),
            frames: fns.iter().map(|f| Frame::new(*f)).collect(),
            dialect: Dialect::Eclipse,
        }
    }

    #[test]
    fn select_policies() {
        let t1 = trace("r", &["a", "b"]);
        let t2 = trace("r", &["c"]);
        assert_eq!(
            select_trace(vec![t1.clone(), t2.clone()], TracePolicy::First),
            Some(t1.clone())
        );
        let merged = select_trace(vec![t1, t2], TracePolicy::Concat).unwrap();
        assert_eq!(names(&merged), ["a", "b", "c"]);
        assert_eq!(merged.frames[2].position, Some(2));
        assert_eq!(select_trace(vec![], TracePolicy::First), None);
    }
}
