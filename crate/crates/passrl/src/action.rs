//! Action catalogs at the three abstraction levels and their decoding
//! into optimizer invocations.
//!
//! Level H actions trigger a fixed sub-sequence of passes, level M a
//! single pass with default parameters, and level L a single pass whose
//! parameter values the agent selects one by one. Catalogs ship as data
//! files so newer optimizer versions only require new files, not code:
//! `action_index <TAB> pass_name` rows for the pipeline partition and
//! `pass <TAB> parameter <TAB> v1,v2,...` rows for tunable parameters
//! (first value = default).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{ActionHistory, ActionId};

/// Pass names that appear in the pipeline file but are analysis or
/// bookkeeping passes, not selectable transformations; they stay inside
/// H sequences but are excluded from the M/L pass catalog.
const NON_TRANSFORM_PASSES: &[&str] = &[
    "tti",
    "verify",
    "tbaa",
    "scoped-noalias",
    "targetlibinfo",
    "globals-aa",
    "barrier",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionLevel {
    H,
    M,
    L,
}

impl fmt::Display for ActionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionLevel::H => "H",
            ActionLevel::M => "M",
            ActionLevel::L => "L",
        })
    }
}

impl std::str::FromStr for ActionLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "H" => Ok(ActionLevel::H),
            "M" => Ok(ActionLevel::M),
            "L" => Ok(ActionLevel::L),
            other => Err(format!("unknown action level `{other}` (expected H, M or L)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    /// Level H: a fixed ordered list of passes.
    PassSequence(Vec<String>),
    /// Level M or L: one pass (defaults at M; at L, parameterized passes
    /// open a pending selection instead of invoking immediately).
    SinglePass(String),
    /// Level L: bind one value to the next parameter of the pending pass.
    ParameterValue { pass: String, parameter: String, value: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub id: ActionId,
    pub level: ActionLevel,
    pub kind: ActionKind,
}

impl ActionSpec {
    /// Whether this action consumes μ budget (parameter-value actions do not).
    pub fn is_pass_level(&self) -> bool {
        !matches!(self.kind, ActionKind::ParameterValue { .. })
    }
}

/// A concrete optimizer invocation: ordered pass names plus explicit flag
/// assignments (empty means defaults).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocation {
    pub passes: Vec<String>,
    pub flags: Vec<(String, String)>,
}

impl Invocation {
    pub fn passes(passes: &[&str]) -> Self {
        Self { passes: passes.iter().map(|s| s.to_string()).collect(), flags: vec![] }
    }

    /// Stable text form used for hashing and wire transfer.
    pub fn canonical(&self) -> String {
        let mut out = self.passes.join(",");
        out.push(';');
        for (i, (name, value)) in self.flags.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(name);
            out.push('=');
            out.push_str(value);
        }
        out
    }
}

/// A level-L pass whose parameters are partially selected. Never stored
/// with an empty `remaining` list: binding the last parameter triggers
/// the invocation instead.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingSelection {
    pub pass: String,
    /// Parameter → value pairs in binding order.
    pub bound: Vec<(String, String)>,
    /// Parameter names still to choose, in catalog order.
    pub remaining: Vec<String>,
}

/// One `pass / parameter / values` row of the parameter catalog.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub pass: String,
    pub parameter: String,
    /// Ordered values; index 0 is the pass's default.
    pub values: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("{path}:{line}: malformed catalog entry `{text}`: {reason}")]
    Malformed { path: String, line: usize, text: String, reason: String },
    #[error("parameter catalog references pass `{pass}` absent from the pipeline catalog")]
    UnknownPass { pass: String },
    #[error("pipeline catalog action indexes are not dense starting at 0 (missing {missing})")]
    SparseActions { missing: u32 },
    #[error("catalog file {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// The pipeline partition: ordered `(action_index, pass)` rows.
#[derive(Clone, Debug, Default)]
pub struct PassCatalog {
    rows: Vec<(u32, String)>,
}

impl PassCatalog {
    pub fn from_str(text: &str, path: &str) -> Result<Self, CatalogError> {
        let mut rows = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let (idx, pass) = match (parts.next(), parts.next()) {
                (Some(i), Some(p)) if !p.trim().is_empty() => (i, p.trim()),
                _ => {
                    return Err(CatalogError::Malformed {
                        path: path.into(),
                        line: lineno + 1,
                        text: raw.into(),
                        reason: "expected `action_index<TAB>pass`".into(),
                    })
                }
            };
            let idx: u32 = idx.trim().parse().map_err(|_| CatalogError::Malformed {
                path: path.into(),
                line: lineno + 1,
                text: raw.into(),
                reason: "action index is not an integer".into(),
            })?;
            rows.push((idx, pass.to_string()));
        }
        Ok(Self { rows })
    }

    pub fn from_file(path: &Path) -> Result<Self, CatalogError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CatalogError::Io { path: path.display().to_string(), source })?;
        Self::from_str(&text, &path.display().to_string())
    }

    /// Pass lists per action, ordered by action index. Indexes must be
    /// dense starting at 0.
    pub fn action_lists(&self) -> Result<Vec<Vec<String>>, CatalogError> {
        let count = match self.rows.iter().map(|(i, _)| i).max() {
            Some(&max) => max + 1,
            None => return Ok(vec![]),
        };
        let mut lists = vec![Vec::new(); count as usize];
        for (idx, pass) in &self.rows {
            lists[*idx as usize].push(pass.clone());
        }
        if let Some(missing) = lists.iter().position(|l| l.is_empty()) {
            return Err(CatalogError::SparseActions { missing: missing as u32 });
        }
        Ok(lists)
    }

    /// Unique transformation passes in first-appearance order, skipping
    /// the analysis/bookkeeping passes of [`NON_TRANSFORM_PASSES`].
    pub fn unique_transform_passes(&self) -> Vec<String> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for (_, pass) in &self.rows {
            if NON_TRANSFORM_PASSES.contains(&pass.as_str()) {
                continue;
            }
            if seen.insert(pass.clone(), ()).is_none() {
                out.push(pass.clone());
            }
        }
        out
    }
}

/// The tunable-parameter table, in file row order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCatalog {
    pub rows: Vec<ParamRow>,
}

impl ParameterCatalog {
    pub fn from_str(text: &str, path: &str) -> Result<Self, CatalogError> {
        let mut rows: Vec<ParamRow> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.splitn(3, '\t').collect();
            let malformed = |reason: &str| CatalogError::Malformed {
                path: path.into(),
                line: lineno + 1,
                text: raw.into(),
                reason: reason.into(),
            };
            if parts.len() != 3 {
                return Err(malformed("expected `pass<TAB>parameter<TAB>v1,v2,...`"));
            }
            let values: Vec<String> = parts[2]
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(malformed("empty value list"));
            }
            let row = ParamRow {
                pass: parts[0].trim().to_string(),
                parameter: parts[1].trim().to_string(),
                values,
            };
            if rows.iter().any(|r| r.pass == row.pass && r.parameter == row.parameter) {
                return Err(malformed("duplicate (pass, parameter) row"));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn from_file(path: &Path) -> Result<Self, CatalogError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CatalogError::Io { path: path.display().to_string(), source })?;
        Self::from_str(&text, &path.display().to_string())
    }

    /// Parameter rows of one pass, in file order.
    pub fn params_of(&self, pass: &str) -> Vec<&ParamRow> {
        self.rows.iter().filter(|r| r.pass == pass).collect()
    }
}

/// Both catalog files, loaded together.
#[derive(Clone, Debug, Default)]
pub struct ActionCatalogs {
    pub passes: PassCatalog,
    pub parameters: ParameterCatalog,
}

impl ActionCatalogs {
    pub fn load(pipeline: &Path, parameters: &Path) -> Result<Self, CatalogError> {
        Ok(Self {
            passes: PassCatalog::from_file(pipeline)?,
            parameters: ParameterCatalog::from_file(parameters)?,
        })
    }

    /// Desk-scale catalogs for the synthetic backend: `n` single-pass
    /// H actions named `s0..s{n-1}` and no tunable parameters.
    pub fn synthetic(n_actions: u32) -> Self {
        Self {
            passes: PassCatalog {
                rows: (0..n_actions).map(|i| (i, format!("s{i}"))).collect(),
            },
            parameters: ParameterCatalog::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("action {action} is unknown in this space of {len} actions")]
    UnknownAction { action: ActionId, len: usize },
    #[error("action {action} is illegal in the current state: {reason}")]
    Illegal { action: ActionId, reason: String },
    #[error("pass-level budget of {mu_max} is exhausted")]
    BudgetExhausted { mu_max: usize },
}

/// Result of decoding one action against the current pending selection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeOutcome {
    /// The action is executable now.
    Invoke(Invocation),
    /// The action only narrowed a level-L parameter selection.
    Pending(PendingSelection),
}

/// Result of applying an action to a history: the updated history and,
/// when the action completed a pass (or was directly executable), the
/// invocation to run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Applied {
    pub history: ActionHistory,
    pub invocation: Option<Invocation>,
}

/// An immutable catalog of actions at one abstraction level.
#[derive(Clone, Debug)]
pub struct ActionSpace {
    pub level: ActionLevel,
    actions: Vec<ActionSpec>,
    /// The unique transformation passes the M/L actions draw from.
    pub pass_catalog: Vec<String>,
    pub parameters: ParameterCatalog,
    /// (pass, parameter, value) → action id, for legality masks.
    value_actions: HashMap<(String, String, String), ActionId>,
}

impl ActionSpace {
    /// Build the action space for `level` from loaded catalogs.
    ///
    /// Ordering is deterministic: H actions follow the pipeline file's
    /// action indexes; M actions order the unique transformation passes by
    /// first appearance in the pipeline file; L lists the M actions first
    /// and then one parameter-value action per catalog row value, in file
    /// order.
    pub fn build(level: ActionLevel, catalogs: &ActionCatalogs) -> Result<Self, CatalogError> {
        let pass_catalog = catalogs.passes.unique_transform_passes();
        for row in &catalogs.parameters.rows {
            if !pass_catalog.contains(&row.pass) {
                return Err(CatalogError::UnknownPass { pass: row.pass.clone() });
            }
        }

        let mut actions = Vec::new();
        match level {
            ActionLevel::H => {
                for list in catalogs.passes.action_lists()? {
                    actions.push(ActionSpec {
                        id: actions.len() as ActionId,
                        level,
                        kind: ActionKind::PassSequence(list),
                    });
                }
            }
            ActionLevel::M | ActionLevel::L => {
                for pass in &pass_catalog {
                    actions.push(ActionSpec {
                        id: actions.len() as ActionId,
                        level,
                        kind: ActionKind::SinglePass(pass.clone()),
                    });
                }
                if level == ActionLevel::L {
                    for row in &catalogs.parameters.rows {
                        for value in &row.values {
                            actions.push(ActionSpec {
                                id: actions.len() as ActionId,
                                level,
                                kind: ActionKind::ParameterValue {
                                    pass: row.pass.clone(),
                                    parameter: row.parameter.clone(),
                                    value: value.clone(),
                                },
                            });
                        }
                    }
                }
            }
        }

        let mut value_actions = HashMap::new();
        for spec in &actions {
            if let ActionKind::ParameterValue { pass, parameter, value } = &spec.kind {
                value_actions
                    .insert((pass.clone(), parameter.clone(), value.clone()), spec.id);
            }
        }

        Ok(Self {
            level,
            actions,
            pass_catalog,
            parameters: catalogs.parameters.clone(),
            value_actions,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> &[ActionSpec] {
        &self.actions
    }

    pub fn spec(&self, id: ActionId) -> Result<&ActionSpec, ActionError> {
        self.actions
            .get(id as usize)
            .ok_or(ActionError::UnknownAction { action: id, len: self.actions.len() })
    }

    pub fn is_pass_level(&self, id: ActionId) -> bool {
        self.spec(id).map(|s| s.is_pass_level()).unwrap_or(false)
    }

    /// Boolean legality mask over all actions for a state with `history`.
    ///
    /// H/M: every action is legal while pass budget remains. L without a
    /// pending pass: only single-pass actions (budget permitting). L with
    /// a pending pass: exactly the value actions of its next remaining
    /// parameter.
    pub fn legal_actions(&self, history: &ActionHistory, mu_max: usize) -> Vec<bool> {
        let mut mask = vec![false; self.actions.len()];
        match history.pending() {
            Some(pending) => {
                if let Some(parameter) = pending.remaining.first() {
                    if let Some(row) = self
                        .parameters
                        .params_of(&pending.pass)
                        .into_iter()
                        .find(|r| &r.parameter == parameter)
                    {
                        for value in &row.values {
                            if let Some(&id) = self.value_actions.get(&(
                                pending.pass.clone(),
                                parameter.clone(),
                                value.clone(),
                            )) {
                                mask[id as usize] = true;
                            }
                        }
                    }
                }
            }
            None => {
                if history.pass_count() < mu_max {
                    for spec in &self.actions {
                        if spec.is_pass_level() {
                            mask[spec.id as usize] = true;
                        }
                    }
                }
            }
        }
        mask
    }

    /// Decode an action against the current pending selection.
    ///
    /// Errors signal a caller bug: decode must only be fed actions that
    /// are legal per [`Self::legal_actions`].
    pub fn decode(
        &self,
        id: ActionId,
        pending: Option<&PendingSelection>,
    ) -> Result<DecodeOutcome, ActionError> {
        let spec = self.spec(id)?;
        let illegal = |reason: &str| ActionError::Illegal { action: id, reason: reason.into() };
        match &spec.kind {
            ActionKind::PassSequence(passes) => {
                if pending.is_some() {
                    return Err(illegal("pass sequence chosen while a selection is pending"));
                }
                Ok(DecodeOutcome::Invoke(Invocation { passes: passes.clone(), flags: vec![] }))
            }
            ActionKind::SinglePass(pass) => {
                if pending.is_some() {
                    return Err(illegal("pass chosen while a selection is pending"));
                }
                let params = self.parameters.params_of(pass);
                if spec.level == ActionLevel::L && !params.is_empty() {
                    Ok(DecodeOutcome::Pending(PendingSelection {
                        pass: pass.clone(),
                        bound: vec![],
                        remaining: params.iter().map(|r| r.parameter.clone()).collect(),
                    }))
                } else {
                    Ok(DecodeOutcome::Invoke(Invocation {
                        passes: vec![pass.clone()],
                        flags: vec![],
                    }))
                }
            }
            ActionKind::ParameterValue { pass, parameter, value } => {
                let current = pending.ok_or_else(|| illegal("no pass selection pending"))?;
                if &current.pass != pass {
                    return Err(illegal("value action targets a different pass"));
                }
                if current.remaining.first() != Some(parameter) {
                    return Err(illegal("value action targets the wrong parameter"));
                }
                let mut bound = current.bound.clone();
                bound.push((parameter.clone(), value.clone()));
                let remaining: Vec<String> = current.remaining[1..].to_vec();
                if remaining.is_empty() {
                    Ok(DecodeOutcome::Invoke(Invocation {
                        passes: vec![pass.clone()],
                        flags: bound,
                    }))
                } else {
                    Ok(DecodeOutcome::Pending(PendingSelection {
                        pass: pass.clone(),
                        bound,
                        remaining,
                    }))
                }
            }
        }
    }

    /// Decode and append in one step: the returned history has the action
    /// recorded (and any pending selection updated), and `invocation` is
    /// set when the action is executable.
    pub fn apply_action(
        &self,
        history: &ActionHistory,
        id: ActionId,
        mu_max: usize,
    ) -> Result<Applied, ActionError> {
        let spec = self.spec(id)?;
        if spec.is_pass_level() && history.pass_count() >= mu_max {
            return Err(ActionError::BudgetExhausted { mu_max });
        }
        let outcome = self.decode(id, history.pending())?;
        let (pending, invocation) = match outcome {
            DecodeOutcome::Pending(p) => (Some(p), None),
            DecodeOutcome::Invoke(inv) => (None, Some(inv)),
        };
        Ok(Applied {
            history: history.push(id, spec.is_pass_level(), pending),
            invocation,
        })
    }
}

/// Append an action to a history, enforcing the μ budget for pass-level
/// actions; parameter-value actions update the pending selection without
/// consuming budget.
pub fn append_action(
    history: &ActionHistory,
    space: &ActionSpace,
    id: ActionId,
    mu_max: usize,
) -> Result<ActionHistory, ActionError> {
    space.apply_action(history, id, mu_max).map(|applied| applied.history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped_catalogs() -> ActionCatalogs {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
        ActionCatalogs::load(&root.join("actions_h.tsv"), &root.join("params_l.tsv")).unwrap()
    }

    #[test]
    fn h_space_has_eight_actions_with_expected_first_list() {
        let space = ActionSpace::build(ActionLevel::H, &shipped_catalogs()).unwrap();
        assert_eq!(space.len(), 8);
        let ActionKind::PassSequence(first) = &space.spec(0).unwrap().kind else {
            panic!("H actions must be pass sequences");
        };
        assert_eq!(
            first,
            &["tti", "verify", "tbaa", "scoped-noalias", "simplifycfg", "sroa", "early-cse",
              "lower-expect"]
        );
    }

    #[test]
    fn m_space_has_42_single_passes() {
        let space = ActionSpace::build(ActionLevel::M, &shipped_catalogs()).unwrap();
        assert_eq!(space.len(), 42);
        assert!(space.actions().iter().all(|a| matches!(a.kind, ActionKind::SinglePass(_))));
        assert_eq!(space.pass_catalog.len(), 42);
    }

    #[test]
    fn l_space_adds_one_action_per_parameter_value() {
        let catalogs = shipped_catalogs();
        let value_total: usize =
            catalogs.parameters.rows.iter().map(|r| r.values.len()).sum();
        let space = ActionSpace::build(ActionLevel::L, &catalogs).unwrap();
        assert_eq!(value_total, 145);
        assert_eq!(space.len(), 42 + value_total);
    }

    #[test]
    fn every_catalog_pass_appears_in_an_h_list() {
        let catalogs = shipped_catalogs();
        let lists = catalogs.passes.action_lists().unwrap();
        let space = ActionSpace::build(ActionLevel::M, &catalogs).unwrap();
        for pass in &space.pass_catalog {
            assert!(
                lists.iter().any(|l| l.contains(pass)),
                "pass {pass} missing from every pipeline action"
            );
        }
    }

    #[test]
    fn decode_h_action_4_yields_its_pass_list() {
        let space = ActionSpace::build(ActionLevel::H, &shipped_catalogs()).unwrap();
        let DecodeOutcome::Invoke(inv) = space.decode(4, None).unwrap() else {
            panic!("H actions invoke immediately");
        };
        assert_eq!(
            inv.passes,
            ["reassociate", "loop-rotate", "licm", "loop-unswitch", "simplifycfg"]
        );
        assert!(inv.flags.is_empty());
    }

    #[test]
    fn decode_m_uses_defaults() {
        let space = ActionSpace::build(ActionLevel::M, &shipped_catalogs()).unwrap();
        let instcombine = space
            .actions()
            .iter()
            .find(|a| a.kind == ActionKind::SinglePass("instcombine".into()))
            .unwrap()
            .id;
        let DecodeOutcome::Invoke(inv) = space.decode(instcombine, None).unwrap() else {
            panic!()
        };
        assert_eq!(inv.passes, ["instcombine"]);
        assert!(inv.flags.is_empty());
    }

    #[test]
    fn l_single_parameter_pass_invokes_after_one_value() {
        let space = ActionSpace::build(ActionLevel::L, &shipped_catalogs()).unwrap();
        let licm = space
            .actions()
            .iter()
            .find(|a| a.kind == ActionKind::SinglePass("licm".into()))
            .unwrap()
            .id;
        let DecodeOutcome::Pending(pending) = space.decode(licm, None).unwrap() else {
            panic!("licm has a parameter and must open a selection");
        };
        assert_eq!(pending.remaining, ["disable-licm-promotion"]);

        let value_action = space.value_actions
            [&("licm".into(), "disable-licm-promotion".into(), "false".into())];
        let DecodeOutcome::Invoke(inv) =
            space.decode(value_action, Some(&pending)).unwrap()
        else {
            panic!("last parameter binding must invoke");
        };
        assert_eq!(inv.passes, ["licm"]);
        assert_eq!(inv.flags, [("disable-licm-promotion".into(), "false".into())]);
    }

    #[test]
    fn l_mask_without_pending_allows_exactly_the_pass_actions() {
        let space = ActionSpace::build(ActionLevel::L, &shipped_catalogs()).unwrap();
        let mask = space.legal_actions(&ActionHistory::empty(), 16);
        for (i, legal) in mask.iter().enumerate() {
            assert_eq!(*legal, i < 42, "action {i}");
        }
    }

    #[test]
    fn l_mask_with_pending_gvn_allows_its_next_parameter_values() {
        let space = ActionSpace::build(ActionLevel::L, &shipped_catalogs()).unwrap();
        let gvn = space
            .actions()
            .iter()
            .find(|a| a.kind == ActionKind::SinglePass("gvn".into()))
            .unwrap()
            .id;
        let history = append_action(&ActionHistory::empty(), &space, gvn, 16).unwrap();
        let mask = space.legal_actions(&history, 16);
        let expected: Vec<ActionId> = ["true", "false"]
            .iter()
            .map(|v| {
                space.value_actions[&("gvn".into(), "enable-pre".into(), v.to_string())]
            })
            .collect();
        for (i, legal) in mask.iter().enumerate() {
            assert_eq!(*legal, expected.contains(&(i as ActionId)), "action {i}");
        }
    }

    #[test]
    fn exhausted_budget_blanks_the_mask() {
        let space = ActionSpace::build(ActionLevel::H, &shipped_catalogs()).unwrap();
        let mut history = ActionHistory::empty();
        for _ in 0..16 {
            history = append_action(&history, &space, 0, 16).unwrap();
        }
        assert!(space.legal_actions(&history, 16).iter().all(|l| !l));
        let err = append_action(&history, &space, 1, 16).unwrap_err();
        assert!(matches!(err, ActionError::BudgetExhausted { mu_max: 16 }));
    }

    #[test]
    fn append_pass_action_uses_budget_and_parameters_do_not() {
        let space = ActionSpace::build(ActionLevel::L, &shipped_catalogs()).unwrap();
        let licm = space
            .actions()
            .iter()
            .find(|a| a.kind == ActionKind::SinglePass("licm".into()))
            .unwrap()
            .id;
        let h1 = append_action(&ActionHistory::empty(), &space, licm, 16).unwrap();
        assert_eq!(h1.entries(), [licm]);
        assert_eq!(h1.pass_count(), 1);

        let value = space.value_actions
            [&("licm".into(), "disable-licm-promotion".into(), "true".into())];
        let h2 = append_action(&h1, &space, value, 16).unwrap();
        assert_eq!(h2.pass_count(), 1, "parameter values never consume budget");
        assert_eq!(h2.entries(), [licm, value]);
        assert!(h2.pending().is_none(), "binding the last parameter closes the selection");
    }

    #[test]
    fn maximal_l_subsequence_has_k_value_actions_and_one_invocation() {
        // loop-unswitch has three parameters; walking them legally must
        // produce exactly one invocation carrying all three flags.
        let space = ActionSpace::build(ActionLevel::L, &shipped_catalogs()).unwrap();
        let start = space
            .actions()
            .iter()
            .find(|a| a.kind == ActionKind::SinglePass("loop-unswitch".into()))
            .unwrap()
            .id;
        let mut history = ActionHistory::empty();
        let mut invocations = 0;
        let mut value_steps = 0;
        let mut next = start;
        loop {
            let applied = space.apply_action(&history, next, 16).unwrap();
            history = applied.history;
            if let Some(inv) = applied.invocation {
                invocations += 1;
                assert_eq!(inv.flags.len(), 3);
                break;
            }
            let mask = space.legal_actions(&history, 16);
            next = mask.iter().position(|&l| l).unwrap() as ActionId;
            value_steps += 1;
        }
        assert_eq!(invocations, 1);
        assert_eq!(value_steps, 3);
    }

    #[test]
    fn malformed_catalog_is_rejected_with_location() {
        let err = PassCatalog::from_str("0\ttti\nnot-a-number\tgvn\n", "test.tsv").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("test.tsv:2"), "{text}");
    }

    #[test]
    fn parameter_row_for_unknown_pass_is_rejected() {
        let catalogs = ActionCatalogs {
            passes: PassCatalog::from_str("0\tsroa\n", "p").unwrap(),
            parameters: ParameterCatalog::from_str("mystery\tknob\t1,2\n", "q").unwrap(),
        };
        let err = ActionSpace::build(ActionLevel::L, &catalogs).unwrap_err();
        assert!(matches!(err, CatalogError::UnknownPass { pass } if pass == "mystery"));
    }

    #[test]
    fn synthetic_catalogs_build_h_spaces_of_requested_size() {
        let space = ActionSpace::build(ActionLevel::H, &ActionCatalogs::synthetic(6)).unwrap();
        assert_eq!(space.len(), 6);
        let DecodeOutcome::Invoke(inv) = space.decode(3, None).unwrap() else { panic!() };
        assert_eq!(inv.passes, ["s3"]);
    }
}
