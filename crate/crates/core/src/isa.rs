//! Toy instruction set: registers, operands, the assembly text format and the
//! enumerated action space the agent and the fuzzer draw instructions from.
//!
//! Four opcodes are modelled: `SBB` (subtract with borrow), `IMUL` (signed
//! multiply), `JNS` (jump if not sign) and `JMP`. Memory operands are always
//! relative to the read-only sandbox base register, written `[BASE+R1]`.
//! Branch targets are relative instruction-count displacements so every prefix
//! of a program is itself a well-formed program.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid action space configuration: {0}")]
    Config(String),
    #[error("action {id} out of range for action space of size {size}")]
    ActionOutOfRange { id: usize, size: usize },
}

/// 64-bit register. `Base` is the sandbox base and is never written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Register {
    R0,
    R1,
    R2,
    #[serde(rename = "BASE")]
    Base,
}

impl Register {
    pub const GENERAL: [Register; 3] = [Register::R0, Register::R1, Register::R2];

    /// Index into the general-purpose register file, `None` for `Base`.
    pub fn gpr_index(self) -> Option<usize> {
        match self {
            Register::R0 => Some(0),
            Register::R1 => Some(1),
            Register::R2 => Some(2),
            Register::Base => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Register::R0 => "R0",
            Register::R1 => "R1",
            Register::R2 => "R2",
            Register::Base => "BASE",
        }
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Register {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "R0" => Ok(Register::R0),
            "R1" => Ok(Register::R1),
            "R2" => Ok(Register::R2),
            "BASE" => Ok(Register::Base),
            other => Err(format!("unknown register `{other}`")),
        }
    }
}

/// A register operand or a sandboxed memory operand `[BASE+index]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Register),
    /// Index register; always one of the general-purpose registers.
    Mem(Register),
}

impl Operand {
    pub fn is_mem(self) -> bool {
        matches!(self, Operand::Mem(_))
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Mem(r) => write!(f, "[BASE+{r}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Sbb,
    Imul,
    Jns,
    Jmp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Sbb { dst: Operand, src: Operand },
    Imul { dst: Register, src: Operand },
    /// Conditional branch, taken iff SF = 0.
    Jns(i32),
    Jmp(i32),
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        match self {
            Instruction::Sbb { .. } => Opcode::Sbb,
            Instruction::Imul { .. } => Opcode::Imul,
            Instruction::Jns(_) => Opcode::Jns,
            Instruction::Jmp(_) => Opcode::Jmp,
        }
    }

    pub fn is_conditional_branch(&self) -> bool {
        matches!(self, Instruction::Jns(_))
    }

    /// Branch displacement, if this is a branch.
    pub fn displacement(&self) -> Option<i32> {
        match *self {
            Instruction::Jns(d) | Instruction::Jmp(d) => Some(d),
            _ => None,
        }
    }

    /// Checks the structural invariants: no write to `BASE`, at most one
    /// memory operand, memory index is a general register, non-zero branch
    /// displacement.
    pub fn validate(&self) -> Result<(), String> {
        let check_mem = |op: Operand| match op {
            Operand::Mem(Register::Base) => Err("memory index must be R0, R1 or R2".to_string()),
            _ => Ok(()),
        };
        match *self {
            Instruction::Sbb { dst, src } => {
                if dst == Operand::Reg(Register::Base) {
                    return Err("BASE is read-only".into());
                }
                if dst.is_mem() && src.is_mem() {
                    return Err("at most one memory operand".into());
                }
                check_mem(dst)?;
                check_mem(src)
            }
            Instruction::Imul { dst, src } => {
                if dst == Register::Base {
                    return Err("BASE is read-only".into());
                }
                check_mem(src)
            }
            Instruction::Jns(0) | Instruction::Jmp(0) => Err("zero branch displacement".into()),
            Instruction::Jns(_) | Instruction::Jmp(_) => Ok(()),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::Sbb { dst, src } => write!(f, "SBB {dst}, {src}"),
            Instruction::Imul { dst, src } => write!(f, "IMUL {dst}, {src}"),
            Instruction::Jns(d) => write!(f, "JNS {d:+}"),
            Instruction::Jmp(d) => write!(f, "JMP {d:+}"),
        }
    }
}

fn parse_operand(text: &str) -> Result<Operand, String> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let upper = compact.to_ascii_uppercase();
    if let Some(inner) = upper.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| format!("malformed memory operand `{text}`"))?;
        let index = inner
            .strip_prefix("BASE+")
            .ok_or_else(|| format!("malformed memory operand `{text}`, expected [BASE+reg]"))?;
        let reg: Register = index.parse()?;
        if reg == Register::Base {
            return Err(format!("malformed memory operand `{text}`, index must be R0, R1 or R2"));
        }
        Ok(Operand::Mem(reg))
    } else {
        upper
            .parse::<Register>()
            .map(Operand::Reg)
            .map_err(|e| format!("malformed operand: {e}"))
    }
}

fn parse_displacement(text: &str) -> Result<i32, String> {
    let t = text.trim();
    let d: i32 = t
        .strip_prefix('+')
        .unwrap_or(t)
        .parse()
        .map_err(|_| format!("malformed displacement `{t}`"))?;
    if d == 0 {
        return Err("zero branch displacement".into());
    }
    Ok(d)
}

impl FromStr for Instruction {
    type Err = String;

    /// Parses one instruction (no comments, no surrounding blank lines).
    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let line = line.trim();
        let (mnemonic, rest) = match line.find(char::is_whitespace) {
            Some(i) => (&line[..i], line[i..].trim()),
            None => (line, ""),
        };
        let instr = match mnemonic.to_ascii_uppercase().as_str() {
            m @ ("SBB" | "IMUL") => {
                let ops: Vec<&str> = rest.split(',').collect();
                if ops.len() != 2 || ops.iter().any(|o| o.trim().is_empty()) {
                    return Err(format!("{m} expects two operands"));
                }
                let dst = parse_operand(ops[0])?;
                let src = parse_operand(ops[1])?;
                if m == "SBB" {
                    Instruction::Sbb { dst, src }
                } else {
                    match dst {
                        Operand::Reg(r) => Instruction::Imul { dst: r, src },
                        Operand::Mem(_) => return Err("malformed operand: IMUL destination must be a register".into()),
                    }
                }
            }
            "JNS" => Instruction::Jns(parse_displacement(rest)?),
            "JMP" => Instruction::Jmp(parse_displacement(rest)?),
            "" => return Err("empty instruction".into()),
            other => return Err(format!("unknown mnemonic `{other}`")),
        };
        instr.validate()?;
        Ok(instr)
    }
}

impl Serialize for Instruction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Instruction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// An attack program: an ordered instruction list. Programs are values;
/// [`Program::append_action`] returns a new program.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Program {
    instrs: Vec<Instruction>,
}

impl Program {
    pub fn new(instrs: Vec<Instruction>) -> Self {
        Program { instrs }
    }

    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instrs
    }

    pub fn get(&self, pc: usize) -> Option<&Instruction> {
        self.instrs.get(pc)
    }

    /// The program with `space.actions[action_id]` appended.
    pub fn append_action(&self, action_id: usize, space: &ActionSpace) -> Result<Program, IsaError> {
        let instr = space.get(action_id)?;
        let mut instrs = Vec::with_capacity(self.instrs.len() + 1);
        instrs.extend_from_slice(&self.instrs);
        instrs.push(instr);
        Ok(Program { instrs })
    }

    /// First `len` instructions.
    pub fn prefix(&self, len: usize) -> Program {
        Program { instrs: self.instrs[..len.min(self.instrs.len())].to_vec() }
    }

    /// Canonical text, one instruction per line, no trailing newline.
    pub fn render(&self) -> String {
        render_program(self)
    }
}

impl FromIterator<Instruction> for Program {
    fn from_iter<T: IntoIterator<Item = Instruction>>(iter: T) -> Self {
        Program { instrs: iter.into_iter().collect() }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_program(self))
    }
}

impl FromStr for Program {
    type Err = IsaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_program(s)
    }
}

/// Parses assembly text. One instruction per line, `;` starts a comment,
/// mnemonics and register names are case-insensitive.
pub fn parse_program(text: &str) -> Result<Program, IsaError> {
    let mut instrs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let code = raw.split(';').next().unwrap_or("").trim();
        if code.is_empty() {
            continue;
        }
        let instr = code
            .parse::<Instruction>()
            .map_err(|msg| IsaError::Parse { line: i + 1, msg })?;
        instrs.push(instr);
    }
    Ok(Program { instrs })
}

pub fn render_program(p: &Program) -> String {
    p.instrs.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("\n")
}

/// Instruction template used to enumerate the action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// `SBB r, r`
    SbbRegReg,
    /// `SBB r, [BASE+r]`
    SbbRegMem,
    /// `SBB [BASE+r], r`
    SbbMemReg,
    /// `IMUL r, r`
    ImulRegReg,
    /// `JNS d` for every configured displacement
    Jns,
    /// `JMP d` for every configured displacement
    Jmp,
}

impl Template {
    pub const DEFAULT_ORDER: [Template; 6] = [
        Template::SbbRegReg,
        Template::SbbRegMem,
        Template::SbbMemReg,
        Template::ImulRegReg,
        Template::Jns,
        Template::Jmp,
    ];
}

/// Action-space configuration. When `instructions` is set it is used verbatim
/// and the generator fields are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionSpaceConfig {
    pub registers: Vec<Register>,
    pub templates: Vec<Template>,
    pub displacements: Vec<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instructions: Option<Vec<Instruction>>,
}

impl Default for ActionSpaceConfig {
    fn default() -> Self {
        ActionSpaceConfig {
            registers: Register::GENERAL.to_vec(),
            templates: Template::DEFAULT_ORDER.to_vec(),
            displacements: vec![-2, 2],
            instructions: None,
        }
    }
}

impl ActionSpaceConfig {
    /// An explicit list of actions.
    pub fn explicit(instructions: Vec<Instruction>) -> Self {
        ActionSpaceConfig { instructions: Some(instructions), ..Default::default() }
    }
}

/// Ordered, duplicate-free list of instructions; index `i` is action `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpace {
    actions: Vec<Instruction>,
}

impl ActionSpace {
    pub fn size(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &[Instruction] {
        &self.actions
    }

    pub fn get(&self, id: usize) -> Result<Instruction, IsaError> {
        self.actions
            .get(id)
            .copied()
            .ok_or(IsaError::ActionOutOfRange { id, size: self.actions.len() })
    }

    /// Index of `instr`, if it is an action of this space.
    pub fn index_of(&self, instr: &Instruction) -> Option<usize> {
        self.actions.iter().position(|a| a == instr)
    }
}

/// Enumerates the action space. Templates expand in the listed order;
/// register pairs enumerate destination-major, source-minor; branch templates
/// expand once per displacement.
pub fn build_action_space(config: &ActionSpaceConfig) -> Result<ActionSpace, IsaError> {
    let actions = match &config.instructions {
        Some(list) => {
            if list.is_empty() {
                return Err(IsaError::Config("explicit instruction list is empty".into()));
            }
            for instr in list {
                instr.validate().map_err(|e| IsaError::Config(format!("{instr}: {e}")))?;
            }
            list.clone()
        }
        None => enumerate_templates(config)?,
    };
    for (i, a) in actions.iter().enumerate() {
        if actions[..i].contains(a) {
            return Err(IsaError::Config(format!("duplicate action `{a}`")));
        }
    }
    Ok(ActionSpace { actions })
}

fn enumerate_templates(config: &ActionSpaceConfig) -> Result<Vec<Instruction>, IsaError> {
    if config.templates.is_empty() {
        return Err(IsaError::Config("empty template list".into()));
    }
    let regs = &config.registers;
    let needs_regs = config
        .templates
        .iter()
        .any(|t| !matches!(t, Template::Jns | Template::Jmp));
    if needs_regs && regs.is_empty() {
        return Err(IsaError::Config("empty register set".into()));
    }
    if regs.contains(&Register::Base) {
        return Err(IsaError::Config("BASE cannot be an action register".into()));
    }
    let has_branches = config.templates.iter().any(|t| matches!(t, Template::Jns | Template::Jmp));
    if has_branches && config.displacements.is_empty() {
        return Err(IsaError::Config("branch templates need at least one displacement".into()));
    }
    if config.displacements.contains(&0) {
        return Err(IsaError::Config("zero branch displacement".into()));
    }

    let mut out = Vec::new();
    for template in &config.templates {
        match template {
            Template::Jns => out.extend(config.displacements.iter().map(|&d| Instruction::Jns(d))),
            Template::Jmp => out.extend(config.displacements.iter().map(|&d| Instruction::Jmp(d))),
            _ => {
                for &dst in regs {
                    for &src in regs {
                        out.push(match template {
                            Template::SbbRegReg => Instruction::Sbb { dst: Operand::Reg(dst), src: Operand::Reg(src) },
                            Template::SbbRegMem => Instruction::Sbb { dst: Operand::Reg(dst), src: Operand::Mem(src) },
                            Template::SbbMemReg => Instruction::Sbb { dst: Operand::Mem(dst), src: Operand::Reg(src) },
                            Template::ImulRegReg => Instruction::Imul { dst, src: Operand::Reg(src) },
                            Template::Jns | Template::Jmp => unreachable!(),
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}
