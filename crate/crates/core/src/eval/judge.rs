//! LLM-as-judge adjudication for open-ended answers.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::client::{ChatClient, ChatRequest};
use crate::error::{Error, Result};
use crate::prompts;

/// Attempts per record before it is marked unjudged.
pub const JUDGE_ATTEMPTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub think: String,
    /// 0 is correct, 1 incorrect.
    pub flag: u8,
}

impl JudgeVerdict {
    pub fn is_correct(&self) -> bool {
        self.flag == 0
    }
}

pub fn judge_prompt(question: &str, answer: &str, response: &str) -> String {
    prompts::fill(
        prompts::JUDGE,
        &[("question", question), ("answer", answer), ("response", response)],
    )
}

/// Parse a well-formed `<judge>0|1</judge>` block; `<think>` is optional.
pub fn parse_judge(reply: &str) -> Option<JudgeVerdict> {
    static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
    let (judge, think) = RE.get_or_init(|| {
        (
            Regex::new(r"<judge>\s*([01])\s*</judge>").expect("valid regex"),
            Regex::new(r"(?s)<think>(.*?)</think>").expect("valid regex"),
        )
    });
    let flags: Vec<u8> = judge.captures_iter(reply).map(|c| if &c[1] == "0" { 0 } else { 1 }).collect();
    // Conflicting blocks are not well formed.
    let flag = *flags.first()?;
    if flags.iter().any(|&f| f != flag) {
        return None;
    }
    let think = think.captures(reply).map(|c| c[1].trim().to_string()).unwrap_or_default();
    Some(JudgeVerdict { think, flag })
}

pub fn judge_open_answer(question: &str, answer: &str, prediction: &str, client: &dyn ChatClient) -> Result<JudgeVerdict> {
    let req = ChatRequest::user(judge_prompt(question, answer, prediction));
    let mut last = String::new();
    for _ in 0..JUDGE_ATTEMPTS {
        let reply = client.complete(&req)?;
        if let Some(v) = parse_judge(&reply) {
            return Ok(v);
        }
        last = reply;
    }
    Err(Error::Format {
        context: "judge",
        message: format!("no <judge> verdict in `{}`", last.chars().take(60).collect::<String>()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::StubClient;

    #[test]
    fn verdict_parsing() {
        let v = judge_open_answer("q", "a", "p", &StubClient::fixed("<think>same meaning</think><judge>0</judge>")).unwrap();
        assert!(v.is_correct());
        assert_eq!(v.think, "same meaning");
        assert!(!judge_open_answer("q", "a", "p", &StubClient::fixed("<judge>1</judge>"))
            .unwrap()
            .is_correct());
        assert!(parse_judge("<judge>0</judge><judge>1</judge>").is_none());
        assert!(parse_judge("<judge>0/1</judge>").is_none());
    }

    #[test]
    fn unparseable_retried_once_then_error() {
        let stub = StubClient::fixed("yes");
        assert!(judge_open_answer("q", "a", "p", &stub).is_err());
        assert_eq!(stub.calls(), 2);
    }

    #[test]
    fn wire_prompt_is_template_with_substitutions() {
        let stub = StubClient::fixed("<judge>0</judge>");
        judge_open_answer("Where is the lesion?", "right frontal lobe", "frontal lobe, right side", &stub).unwrap();
        let expected = prompts::body(prompts::JUDGE)
            .replace("{question}", "Where is the lesion?")
            .replace("{answer}", "right frontal lobe")
            .replace("{response}", "frontal lobe, right side");
        assert_eq!(stub.prompts(), [expected]);
    }
}
