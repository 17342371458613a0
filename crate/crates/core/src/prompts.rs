//! Prompt texts sent to the chat backend.
//!
//! Each request kind opens with a fixed lead line. The offline DBA in
//! [`crate::sim`] and the pattern rules of checked-in scripts dispatch on
//! these lead lines, so changing one invalidates recorded transcripts.

/// Lead line of a chunk-summary request.
pub const SUMMARIZE_LEAD: &str = "Write a short summary of the following document chunk.";
/// Lead line of an experience-extraction request.
pub const EXTRACT_LEAD: &str = "Extract database diagnosis experience from the chunk below.";
/// Lead line of a prompt-template proposal request.
pub const PROPOSE_LEAD: &str = "Propose a prompt template for diagnosing database anomalies.";
/// Lead line of a tree-search step.
pub const STEP_LEAD: &str = "Continue the diagnosis.";
/// Default lead line of a reflection request.
pub const REFLECT_LEAD: &str = "Review this diagnosis step.";
/// Lead line of the final report request of a tree search.
pub const FINAL_LEAD: &str = "Write the final diagnosis report.";
/// Lead line of the single-pass metrics-only baseline.
pub const BASELINE_LEAD: &str = "Metrics-only diagnosis.";
/// Lead line of the chief's scheduling request.
pub const SCHEDULE_LEAD: &str = "Choose who speaks next.";
/// Lead line of the message an agent posts after its turn.
pub const TEAM_MESSAGE_LEAD: &str = "Write your message to the team.";
/// Lead line of a progressive chat-summary update.
pub const SUMMARY_LEAD: &str = "Update the running summary.";
/// Lead line of the chief's consolidated report.
pub const CONSOLIDATE_LEAD: &str = "Consolidate the team's findings into a report for the user.";

pub const NO_EXPERIENCE: &str = "No matched experience.";
pub const NO_TOOLS: &str = "No tools available.";

/// Prefix of a cause line in any analysis.
pub const ROOT_CAUSE_PREFIX: &str = "Root cause:";

/// Chunk summary request. `{section}` and `{content}` are interpolated.
pub const SUMMARIZE_TEMPLATE: &str = "Write a short summary of the following document chunk. \
Name the symptoms, metrics and thresholds it covers in one or two sentences.
Section: {section}

{content}";

/// Extraction request. `{context}` lists the summaries of related chunks.
pub const EXTRACT_TEMPLATE: &str = "Extract database diagnosis experience from the chunk below. \
Related chunks are summarized for context; use them only to complete rules that the chunk starts.
Related summaries:
{context}
Extract from: {section}

{content}

Answer with a JSON array. Each element has the fields name (snake_case identifier), \
content (what the rule is about), metrics (metric names the rule reads) and steps \
(how to check it). Answer [] when the chunk holds no diagnosis rule.";

/// Proposal request. `{pairs}` holds the input/output examples.
pub const PROPOSE_TEMPLATE: &str = "Propose a prompt template for diagnosing database anomalies. \
The template must contain the placeholders {anomaly}, {tools} and {experience} exactly once each. \
Reply with the template text only.
Candidate: {index}
Examples:
{pairs}";

/// Default reflection template. `{action}` and `{observation}` are
/// interpolated.
pub const REFLECT_TEMPLATE: &str = "Review this diagnosis step. Reply `useful` if it revealed \
information that narrows down the root cause, otherwise reply `useless`.
Step: {action}
Observation: {observation}";

/// The shipped diagnosis template. It asks the model to work through the
/// matched experience before concluding.
pub const DEFAULT_DIAGNOSIS_TEMPLATE: &str = "You are a database administrator investigating a performance anomaly.

Anomaly:
{anomaly}

Tools you can call:
{tools}

Matched maintenance experience:
{experience}

Follow the matched experience. List the abnormal metrics first, then run the checks of each \
experience whose metrics are abnormal, and confirm a cause only when a check supports it.";

/// A weaker template that ignores experience and reasons from metrics alone.
pub const METRIC_ONLY_TEMPLATE: &str = "You are a database administrator investigating a performance anomaly.

Anomaly:
{anomaly}

Tools you can call:
{tools}

Background notes:
{experience}

Read the abnormal metrics and name the cause suggested by the most severe one.";

/// Substitutes `{name}` placeholders. Unknown placeholders are left as is.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

/// Cause names stated as `Root cause: X` lines, in order of appearance.
pub fn parse_root_causes(text: &str) -> Vec<String> {
    let mut causes = Vec::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        if let Some(rest) = line.strip_prefix(ROOT_CAUSE_PREFIX) {
            let cause = crate::causes::normalize_cause(rest);
            if !cause.is_empty() && !causes.contains(&cause) {
                causes.push(cause);
            }
        }
    }
    causes
}
