//! `key = value` config files. Keys before any header, or under `[general]`,
//! apply to every subcommand; `[train]`, `[extract]` and so on apply to one.
//! File values are injected as flags after the subcommand name, skipping any
//! flag the user typed, so the precedence is defaults < file < command line.

use std::collections::{BTreeMap, BTreeSet};

use clap::{Arg, ArgAction, Command};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub section: Option<String>,
    pub key: String,
    pub value: String,
    pub line: usize,
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

/// Parses the file, collecting every syntax error rather than stopping at
/// the first.
pub fn parse(text: &str) -> Result<Vec<Entry>, Vec<String>> {
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    let mut section = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        if let Some(rest) = l.strip_prefix('[') {
            match rest.strip_suffix(']') {
                Some(name) if !name.trim().is_empty() => {
                    let n = name.trim().to_ascii_lowercase();
                    section = if n == "general" { None } else { Some(n) };
                }
                _ => errors.push(format!("line {line}: malformed section header '{l}'")),
            }
            continue;
        }
        match l.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => entries.push(Entry {
                section: section.clone(),
                key: normalize(k),
                value: v.trim().trim_matches('"').to_string(),
                line,
            }),
            _ => errors.push(format!("line {line}: expected key = value, found '{l}'")),
        }
    }
    if errors.is_empty() {
        Ok(entries)
    } else {
        Err(errors)
    }
}

fn long_args(cmd: &Command) -> BTreeMap<String, Arg> {
    cmd.get_arguments()
        .filter(|a| !a.is_global_set())
        .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.clone())))
        .filter(|(l, _)| l != "help" && l != "config" && l != "verbose")
        .collect()
}

/// Locates `--config` and the subcommand token in raw arguments.
pub fn scan(args: &[String], subcommands: &BTreeSet<String>) -> (Option<String>, Option<usize>) {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if a == "--config" {
            config = args.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.to_string());
        } else if sub.is_none() && subcommands.contains(a.as_str()) {
            sub = Some(i);
        }
        i += 1;
    }
    (config, sub)
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

/// Result of merging a config file into the argument list.
#[derive(Debug, Default)]
pub struct Injection {
    pub args: Vec<String>,
    /// Long flag names whose value came from the file.
    pub from_file: BTreeSet<String>,
}

/// Rewrites `args` with the file's values for the chosen subcommand. All
/// unknown keys and unparsable values are reported together.
pub fn inject(root: &Command, args: &[String], entries: &[Entry], sub_index: usize) -> Result<Injection, Vec<String>> {
    let sub_name = &args[sub_index];
    let sub = root.find_subcommand(sub_name).expect("known subcommand");
    let known = long_args(sub);
    let all_known: BTreeSet<String> = root.get_subcommands().flat_map(|c| long_args(c).into_keys()).collect();
    let sections: BTreeSet<String> = root.get_subcommands().map(|c| c.get_name().to_string()).collect();

    let mut errors = Vec::new();
    let mut chosen: BTreeMap<String, &Entry> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.section.is_none()) {
        if known.contains_key(&e.key) {
            chosen.insert(e.key.clone(), e);
        } else if !all_known.contains(&e.key) {
            errors.push(format!("line {}: unknown key '{}'", e.line, e.key));
        }
    }
    for e in entries.iter().filter(|e| e.section.is_some()) {
        let s = e.section.as_deref().unwrap_or_default();
        if !sections.contains(s) {
            errors.push(format!("line {}: unknown section [{s}]", e.line));
        } else if s == sub_name.as_str() {
            if known.contains_key(&e.key) {
                chosen.insert(e.key.clone(), e);
            } else {
                errors.push(format!("line {}: unknown key '{}' for {s}", e.line, e.key));
            }
        } else if !long_args(root.find_subcommand(s).expect("section")).contains_key(&e.key) {
            errors.push(format!("line {}: unknown key '{}' for {s}", e.line, e.key));
        }
    }

    let typed: BTreeSet<String> = args[sub_index + 1..]
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();

    let mut injected = Vec::new();
    let mut from_file = BTreeSet::new();
    for (key, e) in chosen {
        if typed.contains(&key) {
            continue;
        }
        let arg = &known[&key];
        let flag = format!("--{key}");
        match arg.get_action() {
            ArgAction::SetTrue => match parse_bool(&e.value) {
                Some(true) => injected.push(flag),
                Some(false) => {}
                None => {
                    errors.push(format!("line {}: '{}' expects true or false, found '{}'", e.line, key, e.value));
                    continue;
                }
            },
            ArgAction::Append => {
                for v in e.value.split_whitespace() {
                    injected.push(flag.clone());
                    injected.push(v.to_string());
                }
            }
            _ if arg.get_num_args().is_some_and(|r| r.max_values() > 1) => {
                injected.push(flag);
                injected.extend(e.value.split_whitespace().map(String::from));
            }
            _ => injected.push(format!("{flag}={}", e.value)),
        }
        from_file.insert(key);
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    let mut out = args[..=sub_index].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[sub_index + 1..]);
    Ok(Injection { args: out, from_file })
}
