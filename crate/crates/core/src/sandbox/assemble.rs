//! Turns a candidate solution plus test harnesses into runnable programs.
//!
//! Interpreted languages get one file per test: solution, then harness.
//! Compiled languages get a single program whose entry point dispatches on
//! the test index passed as the first argument, so the candidate is built
//! once. Harnesses that bring their own entry point (as benchmark suites
//! often do) are appended verbatim instead.

use std::sync::LazyLock;

use regex::Regex;

use crate::model::Language;

const CPP_PRELUDE: &str = "#include <algorithm>\n#include <cassert>\n#include <climits>\n#include <cmath>\n\
#include <cstdlib>\n#include <iostream>\n#include <map>\n#include <numeric>\n#include <set>\n\
#include <sstream>\n#include <string>\n#include <tuple>\n#include <unordered_map>\n#include <unordered_set>\n\
#include <utility>\n#include <vector>\nusing namespace std;\n";

const JAVA_PRELUDE: &str = "import java.util.*;\nimport java.util.stream.*;\n";

const CSHARP_PRELUDE: &str = "using System;\nusing System.Collections.Generic;\nusing System.Linq;\n";

const TS_PRELUDE: &str = "declare const process: any;\n";

static ENTRY_POINT: LazyLock<[(Language, Regex); 3]> = LazyLock::new(|| {
    [
        (Language::Cpp, Regex::new(r"\bint\s+main\s*\(").unwrap()),
        (Language::Java, Regex::new(r"\bstatic\s+void\s+main\s*\(").unwrap()),
        (Language::Csharp, Regex::new(r"\bstatic\s+(?:async\s+)?\w+\s+Main\s*\(").unwrap()),
    ]
});

/// Whether `text` defines its own program entry point.
pub fn has_entry_point(language: Language, text: &str) -> bool {
    ENTRY_POINT
        .iter()
        .find(|(l, _)| *l == language)
        .is_some_and(|(_, re)| re.is_match(text))
}

fn strip_php_tag(text: &str) -> &str {
    let t = text.trim_start();
    t.strip_prefix("<?php").unwrap_or(t)
}

fn indent(text: &str, by: &str) -> String {
    text.lines()
        .map(|l| if l.trim().is_empty() { String::new() } else { format!("{by}{l}") })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Solution followed by one harness, no dispatch. Used for interpreted
/// languages and for harnesses with their own entry point.
pub fn single(language: Language, code: &str, harness: &str) -> String {
    match language {
        Language::Php => format!("<?php\n{}\n\n{}\n", strip_php_tag(code), strip_php_tag(harness)),
        Language::Typescript => format!("{TS_PRELUDE}{code}\n\n{harness}\n"),
        Language::Cpp if has_entry_point(language, harness) || has_entry_point(language, code) => {
            format!("{CPP_PRELUDE}{code}\n\n{harness}\n")
        }
        Language::Java | Language::Csharp
            if has_entry_point(language, harness) || has_entry_point(language, code) =>
        {
            let prelude = if language == Language::Java { JAVA_PRELUDE } else { CSHARP_PRELUDE };
            format!("{prelude}{code}\n\n{harness}\n")
        }
        Language::Cpp | Language::Java | Language::Csharp => dispatch(language, code, &[harness]),
        _ => format!("{code}\n\n{harness}\n"),
    }
}

/// One program running harness `i` when invoked with argument `i`.
pub fn dispatch(language: Language, code: &str, harnesses: &[&str]) -> String {
    match language {
        Language::Python => {
            let mut out = format!("import sys\n\n{code}\n\n_t = int(sys.argv[1])\n");
            for (i, h) in harnesses.iter().enumerate() {
                let kw = if i == 0 { "if" } else { "elif" };
                out.push_str(&format!("{kw} _t == {i}:\n{}\n", indent(h, "    ")));
            }
            out
        }
        Language::Javascript | Language::Typescript => {
            let prelude = if language == Language::Typescript { TS_PRELUDE } else { "" };
            let body: String = harnesses
                .iter()
                .enumerate()
                .map(|(i, h)| format!("  case {i}: {{\n{}\n    break;\n  }}\n", indent(h, "    ")))
                .collect();
            format!("{prelude}{code}\n\nswitch (Number(process.argv[2])) {{\n{body}}}\n")
        }
        Language::Php => {
            let body: String = harnesses
                .iter()
                .enumerate()
                .map(|(i, h)| format!("  case {i}: {{\n{}\n    break;\n  }}\n", indent(strip_php_tag(h), "    ")))
                .collect();
            format!("<?php\n{}\n\nswitch (intval($argv[1])) {{\n{body}}}\n", strip_php_tag(code))
        }
        Language::Bash => {
            let body: String = harnesses
                .iter()
                .enumerate()
                .map(|(i, h)| format!("  {i})\n{}\n    ;;\n", indent(h, "    ")))
                .collect();
            format!("{code}\n\ncase \"$1\" in\n{body}esac\n")
        }
        Language::Cpp => {
            let body: String = harnesses
                .iter()
                .enumerate()
                .map(|(i, h)| format!("    case {i}: {{\n{}\n        break;\n    }}\n", indent(h, "        ")))
                .collect();
            format!(
                "{CPP_PRELUDE}\n{code}\n\nint main(int argc, char** argv) {{\n    switch (argc > 1 ? atoi(argv[1]) : 0) {{\n{body}    }}\n    return 0;\n}}\n"
            )
        }
        Language::Java => {
            let body: String = harnesses
                .iter()
                .enumerate()
                .map(|(i, h)| format!("            case {i}: {{\n{}\n                break;\n            }}\n", indent(h, "                ")))
                .collect();
            format!(
                "{JAVA_PRELUDE}\npublic class Main {{\n{}\n\n    public static void main(String[] args) {{\n        switch (Integer.parseInt(args[0])) {{\n{body}        }}\n    }}\n}}\n",
                indent(code, "    ")
            )
        }
        Language::Csharp => {
            let body: String = harnesses
                .iter()
                .enumerate()
                .map(|(i, h)| format!("            case {i}: {{\n{}\n                break;\n            }}\n", indent(h, "                ")))
                .collect();
            format!(
                "{CSHARP_PRELUDE}\npublic class Program\n{{\n{}\n\n    public static void Main(string[] args)\n    {{\n        switch (int.Parse(args[0]))\n        {{\n{body}        }}\n    }}\n}}\n",
                indent(code, "    ")
            )
        }
    }
}
