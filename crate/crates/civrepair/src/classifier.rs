//! Type-centric CIV classification.
//!
//! Findings are categorized by the data type of the mutated interface
//! value: pointer, scalar, structured payload, or opaque handle. Each
//! category carries a fixed binding of boundary focus, security-impact
//! ordering, and patching unit, plus the oracle guard that represents the
//! strongest possible validity check for values of that type. A mutated
//! leaf nested inside a structured parameter classifies as a structured
//! payload even when the leaf itself is a pointer — the relevant boundary
//! is the containing structure's field, and the oracle resolves to the
//! field's own type (hybrid checking).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fuzzer::CivFinding;
use crate::policy::{CompartmentPolicy, IfaceType, InterfaceSpec, ScalarDomain, SecurityGoal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CivCategory {
    Pointer,
    Scalar,
    StructuredPayload,
    OpaqueHandle,
}

impl CivCategory {
    pub const ALL: &'static [CivCategory] = &[
        CivCategory::Pointer,
        CivCategory::Scalar,
        CivCategory::StructuredPayload,
        CivCategory::OpaqueHandle,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            CivCategory::Pointer => "Pointer",
            CivCategory::Scalar => "Scalar",
            CivCategory::StructuredPayload => "Structured Payload",
            CivCategory::OpaqueHandle => "Opaque Handle",
        }
    }
}

impl fmt::Display for CivCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// What the boundary check must focus on for each category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryFocus {
    Legality,
    Domain,
    SemanticFields,
    HandleValidity,
}

impl BoundaryFocus {
    pub fn label(&self) -> &'static str {
        match self {
            BoundaryFocus::Legality => "Legality",
            BoundaryFocus::Domain => "Domain",
            BoundaryFocus::SemanticFields => "Semantic fields",
            BoundaryFocus::HandleValidity => "Handle validity & semantics",
        }
    }
}

/// Granularity the fix should operate at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchingUnit {
    PointerInstance,
    ScalarToken,
    Field,
    HandleInstance,
}

impl PatchingUnit {
    pub fn label(&self) -> &'static str {
        match self {
            PatchingUnit::PointerInstance => "pointer instance",
            PatchingUnit::ScalarToken => "scalar token",
            PatchingUnit::Field => "field",
            PatchingUnit::HandleInstance => "handle instance",
        }
    }
}

/// Relation between adjacent goals in an impact ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImpactRel {
    /// Strictly dominates the next goal.
    Dominates,
    /// Comparable with the next goal.
    Comparable,
}

/// Ordinal ordering over security goals, e.g. `Availability >> Integrity`.
/// The relations carry no quantitative scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpactOrdering {
    pub goals: Vec<SecurityGoal>,
    /// `rels[i]` relates `goals[i]` to `goals[i + 1]`.
    pub rels: Vec<ImpactRel>,
}

impl ImpactOrdering {
    fn new(goals: Vec<SecurityGoal>, rels: Vec<ImpactRel>) -> Self {
        debug_assert_eq!(rels.len() + 1, goals.len());
        ImpactOrdering { goals, rels }
    }

    pub fn dominant(&self) -> SecurityGoal {
        self.goals[0]
    }
}

impl fmt::Display for ImpactOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, goal) in self.goals.iter().enumerate() {
            if i > 0 {
                f.write_str(match self.rels[i - 1] {
                    ImpactRel::Dominates => " >> ",
                    ImpactRel::Comparable => " ~ ",
                })?;
            }
            let name = match goal {
                SecurityGoal::Confidentiality => "Confidentiality",
                SecurityGoal::Integrity => "Integrity",
                SecurityGoal::Availability => "Availability",
            };
            f.write_str(name)?;
        }
        Ok(())
    }
}

/// How reliably violations of this category can be detected at the
/// boundary. Advisory prompt metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detectability {
    High,
    Medium,
}

/// A classified CIV with its category bindings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CivClass {
    pub category: CivCategory,
    pub boundary_focus: BoundaryFocus,
    pub impact: ImpactOrdering,
    pub patching_unit: PatchingUnit,
    pub oracle: OracleGuard,
    pub detectability: Detectability,
}

/// The hypothetical strongest validity check for a value type, with its
/// parameters resolved from the interface declaration:
///
/// - `PointerMapped` holds iff the whole pointed-to object lies in mapped
///   memory;
/// - `InDomain` holds iff the value is inside its declared domain;
/// - `VerifyFormat` holds iff the handle satisfies its declared kind's
///   format constraints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleGuard {
    IsPointerMapped { size: u64 },
    IsInDomain { domain: ScalarDomain },
    VerifyFormat { kind: String },
}

impl OracleGuard {
    pub fn name(&self) -> &'static str {
        match self {
            OracleGuard::IsPointerMapped { .. } => "is_pointer_mapped",
            OracleGuard::IsInDomain { .. } => "is_in_domain",
            OracleGuard::VerifyFormat { .. } => "verify_format",
        }
    }
}

impl fmt::Display for OracleGuard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleGuard::IsPointerMapped { size } => write!(f, "is_pointer_mapped(_, {size})"),
            OracleGuard::IsInDomain { domain } => write!(f, "is_in_domain(_, {domain})"),
            OracleGuard::VerifyFormat { kind } => write!(f, "verify_format(_, {kind})"),
        }
    }
}

/// The fixed per-category bindings (focus, impact ordering, patching unit,
/// detectability).
pub fn category_bindings(
    category: CivCategory,
) -> (BoundaryFocus, ImpactOrdering, PatchingUnit, Detectability) {
    use SecurityGoal::{Availability as A, Confidentiality as C, Integrity as I};
    match category {
        CivCategory::Pointer => (
            BoundaryFocus::Legality,
            ImpactOrdering::new(vec![A, I], vec![ImpactRel::Dominates]),
            PatchingUnit::PointerInstance,
            Detectability::High,
        ),
        CivCategory::Scalar => (
            BoundaryFocus::Domain,
            ImpactOrdering::new(vec![I, A], vec![ImpactRel::Dominates]),
            PatchingUnit::ScalarToken,
            Detectability::High,
        ),
        CivCategory::StructuredPayload => (
            BoundaryFocus::SemanticFields,
            ImpactOrdering::new(
                vec![C, I, A],
                vec![ImpactRel::Comparable, ImpactRel::Dominates],
            ),
            PatchingUnit::Field,
            Detectability::Medium,
        ),
        CivCategory::OpaqueHandle => (
            BoundaryFocus::HandleValidity,
            ImpactOrdering::new(vec![C, I], vec![ImpactRel::Dominates]),
            PatchingUnit::HandleInstance,
            Detectability::Medium,
        ),
    }
}

/// Classify a finding by the type position of its mutated path.
pub fn classify(finding: &CivFinding, spec: &InterfaceSpec) -> Result<CivClass> {
    let path = &finding.mutation.mutated_path;
    let leaf = spec.resolve_path(&finding.mutation.entry_function, path)?;

    let category = if path.is_root_only() {
        match leaf {
            IfaceType::Pointer { .. } => CivCategory::Pointer,
            IfaceType::Scalar { .. } => CivCategory::Scalar,
            IfaceType::OpaqueHandle { .. } => CivCategory::OpaqueHandle,
            IfaceType::Structured { .. } => CivCategory::StructuredPayload,
        }
    } else {
        // The tainted value originates from a corrupted subfield of a
        // larger interface structure, whatever the leaf itself is.
        CivCategory::StructuredPayload
    };

    let (boundary_focus, impact, patching_unit, detectability) = category_bindings(category);
    Ok(CivClass {
        category,
        boundary_focus,
        impact,
        patching_unit,
        oracle: oracle_for(category, leaf),
        detectability,
    })
}

/// The oracle guard for a category, resolved against the mutated leaf's
/// declared type. Structured payloads get the oracle matching the subfield
/// (hybrid resolution).
pub fn oracle_for(category: CivCategory, leaf: &IfaceType) -> OracleGuard {
    match (category, leaf) {
        (_, IfaceType::Pointer { target_size, .. }) => OracleGuard::IsPointerMapped {
            size: *target_size,
        },
        (_, IfaceType::Scalar { domain }) => OracleGuard::IsInDomain {
            domain: domain.clone(),
        },
        (_, IfaceType::OpaqueHandle { kind }) => OracleGuard::VerifyFormat { kind: kind.clone() },
        // A whole structured parameter replaced wholesale: field-wise
        // checking applies; default to mapping legality of the container.
        (_, IfaceType::Structured { .. }) => OracleGuard::IsPointerMapped { size: 1 },
    }
}

/// Render the class's impact ordering intersected with the policy's
/// declared security goals, for prompts and human reports.
pub fn impact_summary(class: &CivClass, policy: &CompartmentPolicy) -> String {
    let relevant: Vec<SecurityGoal> = class
        .impact
        .goals
        .iter()
        .copied()
        .filter(|g| policy.security_goals.contains(g))
        .collect();
    let ordering = format!("impact ordering: {}", class.impact);
    if relevant.is_empty() {
        return format!(
            "none of the policy's declared security goals dominate this class; {ordering}"
        );
    }
    let mut parts = Vec::new();
    for goal in relevant {
        if goal == class.impact.dominant() {
            parts.push(format!(
                "{goal} at risk (dominant for {} CIVs)",
                class.category.label().to_ascii_lowercase()
            ));
        } else {
            parts.push(format!("{goal} at risk (secondary)"));
        }
    }
    format!("{}; {ordering}", parts.join("; "))
}
