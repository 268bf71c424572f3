"""MiniLang: a tiny indentation-based imperative language and its ``check`` test DSL.

Programs are one main function optionally followed by helper functions::

    def f(a, b):
      x = a + 1
      if x < b:
        return x
      elif b == 0:
        return 0 - x
      else:
        x = x * 2
      return x

Values are integers and booleans (``true`` / ``false``).  Tests are single
lines of the form ``check f(2, true) == 5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

Value = Union[int, bool]

KEYWORDS = {
    "def": "DEF",
    "if": "IF",
    "elif": "ELIF",
    "else": "ELSE",
    "while": "WHILE",
    "return": "RETURN",
    "and": "AND",
    "or": "OR",
    "not": "NOT",
    "true": "TRUE",
    "false": "FALSE",
    "check": "CHECK",
}

# longest match first
OPERATORS = [
    ("//", "FLOORDIV"),
    ("<=", "LE"),
    ("==", "EQEQ"),
    ("!=", "NE"),
    ("+", "PLUS"),
    ("-", "MINUS"),
    ("*", "STAR"),
    ("%", "PERCENT"),
    ("<", "LT"),
    ("=", "EQ"),
    ("(", "LPAREN"),
    (")", "RPAREN"),
    (",", "COMMA"),
    (":", "COLON"),
]

KINDS = [
    "Assign", "If", "Elif", "While", "Return", "Call", "BinOp", "UnaryOp",
    "Var", "IntLit", "BoolLit", "Param",
    "FuncDef", "Block", "Else", "CheckStmt",
]
KIND_CODE = {k: i for i, k in enumerate(KINDS)}

STATEMENT_KINDS = frozenset({"Assign", "If", "Elif", "While", "Return"})
LAYOUT = frozenset({"NEWLINE", "INDENT", "DEDENT"})


class LexError(Exception):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


class ParseError(Exception):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


@dataclass(frozen=True)
class Token:
    kind: str
    lexeme: str
    line: int
    col: int
    offset: int

    def __repr__(self) -> str:
        if self.kind in ("IDENT", "INT"):
            return f"{self.kind}({self.lexeme})"
        return self.kind


def tokenize(text: str) -> list[Token]:
    """Split ``text`` into tokens.

    NEWLINE is emitted at the end of every non-blank logical line that is
    followed by a line break; INDENT/DEDENT are zero-width tokens emitted
    when indentation changes.  Whitespace between tokens is recoverable from
    the token offsets.
    """
    tokens: list[Token] = []
    indents = [0]
    offset = 0
    lines = text.split("\n")
    for lineno, raw in enumerate(lines, start=1):
        stripped = raw.strip(" ")
        if stripped == "":
            offset += len(raw) + 1
            continue
        if "\t" in raw[: len(raw) - len(raw.lstrip())]:
            raise LexError("tab in indentation", lineno, 1)
        width = len(raw) - len(raw.lstrip(" "))
        if width > indents[-1]:
            indents.append(width)
            tokens.append(Token("INDENT", "", lineno, width + 1, offset + width))
        else:
            while width < indents[-1]:
                indents.pop()
                tokens.append(Token("DEDENT", "", lineno, width + 1, offset + width))
            if width != indents[-1]:
                raise LexError("inconsistent dedent", lineno, width + 1)
        col = width
        while col < len(raw):
            ch = raw[col]
            if ch == " ":
                col += 1
                continue
            start = col
            if ch.isdigit():
                while col < len(raw) and raw[col].isdigit():
                    col += 1
                tokens.append(Token("INT", raw[start:col], lineno, start + 1, offset + start))
                continue
            if ch.isalpha() or ch == "_":
                while col < len(raw) and (raw[col].isalnum() or raw[col] == "_"):
                    col += 1
                word = raw[start:col]
                tokens.append(Token(KEYWORDS.get(word, "IDENT"), word, lineno, start + 1, offset + start))
                continue
            for lexeme, kind in OPERATORS:
                if raw.startswith(lexeme, col):
                    tokens.append(Token(kind, lexeme, lineno, start + 1, offset + start))
                    col += len(lexeme)
                    break
            else:
                raise LexError(f"illegal character {ch!r}", lineno, col + 1)
        if lineno < len(lines):
            tokens.append(Token("NEWLINE", "\n", lineno, len(raw) + 1, offset + len(raw)))
        offset += len(raw) + 1
    end_line = len(lines)
    while len(indents) > 1:
        indents.pop()
        tokens.append(Token("DEDENT", "", end_line, 1, len(text)))
    return tokens


def untokenize(tokens: list[Token], text: str) -> str:
    """Rebuild ``text`` from token lexemes plus the whitespace between them."""
    out = []
    pos = 0
    for tok in tokens:
        gap = text[pos:tok.offset]
        assert gap.strip(" \n") == "", gap
        out.append(gap)
        out.append(tok.lexeme)
        pos = tok.offset + len(tok.lexeme)
    out.append(text[pos:])
    return "".join(out)


@dataclass
class AstNode:
    id: int
    kind: str
    children: list[int] = field(default_factory=list)
    line_start: int = 0
    line_end: int = 0
    order: int = 0
    parent: Optional[int] = None
    # kind-specific payload: identifier, operator, or literal value
    name: Optional[str] = None
    op: Optional[str] = None
    value: Optional[Value] = None
    tok_start: int = 0
    tok_end: int = 0

    @property
    def kind_code(self) -> int:
        return KIND_CODE[self.kind]


@dataclass
class Tree:
    """A parsed program: nodes indexed densely by id, root at id 0."""

    nodes: list[AstNode]
    tokens: list[Token] = field(default_factory=list)

    @property
    def root(self) -> AstNode:
        return self.nodes[0]

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, i: int) -> AstNode:
        return self.nodes[i]

    def child_nodes(self, node: AstNode) -> list[AstNode]:
        return [self.nodes[c] for c in node.children]

    def walk(self, start: int = 0) -> Iterator[AstNode]:
        stack = [start]
        while stack:
            node = self.nodes[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def depth(self, node_id: int) -> int:
        d = 0
        node = self.nodes[node_id]
        while node.parent is not None:
            d += 1
            node = self.nodes[node.parent]
        return d

    def structure(self, node_id: int = 0) -> tuple:
        """Position-free nested tuple used for structural equality."""
        n = self.nodes[node_id]
        return (n.kind, n.name, n.op, _typed(n.value)) + tuple(self.structure(c) for c in n.children)

    def functions(self) -> list[AstNode]:
        return [n for n in self.nodes if n.kind == "FuncDef"]

    def function(self, name: str) -> AstNode:
        for fn in self.functions():
            if fn.name == name:
                return fn
        raise KeyError(name)

    def is_statement(self, node: AstNode) -> bool:
        if node.kind in STATEMENT_KINDS:
            return True
        return node.kind == "Call" and node.parent is not None and self.nodes[node.parent].kind == "Block"

    def body(self, fn: AstNode) -> AstNode:
        return next(c for c in self.child_nodes(fn) if c.kind == "Block")

    def params(self, fn: AstNode) -> list[AstNode]:
        return [c for c in self.child_nodes(fn) if c.kind == "Param"]


def _typed(v):
    return None if v is None else (type(v).__name__, v)


@dataclass(frozen=True)
class SourceProgram:
    name: str
    text: str
    line_count: int

    @classmethod
    def from_text(cls, name: str, text: str) -> "SourceProgram":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(name, text, max(1, len(lines)))


@dataclass(frozen=True, eq=False)
class TestCase:
    call_target: str
    args: tuple
    expected: Value

    __test__ = False  # not a pytest class

    @property
    def source_text(self) -> str:
        return f"check {self.call_target}({', '.join(map(format_value, self.args))}) == {format_value(self.expected)}"

    def _key(self):
        return (self.call_target, tuple(_typed(a) for a in self.args), _typed(self.expected))

    def __eq__(self, other) -> bool:
        # 1 and true are different MiniLang values
        return isinstance(other, TestCase) and self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())

    def __str__(self) -> str:
        return self.source_text


def format_value(v: Value) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# ---------------------------------------------------------------------------
# parser


BINARY_LEVELS = [
    {"or"},
    {"and"},
    None,  # unary not
    {"<", "<=", "==", "!="},
    {"+", "-"},
    {"*", "//", "%"},
]
PRECEDENCE = {"or": 1, "and": 2, "not": 3, "<": 4, "<=": 4, "==": 4, "!=": 4,
              "+": 5, "-": 5, "*": 6, "//": 6, "%": 6}
UNARY_MINUS_PREC = 7
ATOM_PREC = 8


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.pos = 0
        self.nodes: list[AstNode] = []

    # token helpers
    def peek(self, k: int = 0) -> Optional[Token]:
        i = self.pos + k
        return self.toks[i] if i < len(self.toks) else None

    def at(self, *kinds: str) -> bool:
        t = self.peek()
        return t is not None and t.kind in kinds

    def expect(self, kind: str, what: Optional[str] = None) -> Token:
        t = self.peek()
        if t is None or t.kind != kind:
            self.fail(f"expected {what or kind}")
        self.pos += 1
        return t

    def fail(self, message: str):
        t = self.peek()
        if t is None:
            last = self.toks[-1] if self.toks else None
            line = last.line if last else 1
            col = (last.col + len(last.lexeme)) if last else 1
            raise ParseError(message + ", found end of input", line, col)
        found = t.lexeme if t.lexeme.strip() else t.kind
        raise ParseError(f"{message}, found {found!r}", t.line, t.col)

    def skip_newlines(self):
        while self.at("NEWLINE"):
            self.pos += 1

    # node construction; ids are assigned in pre-order by `renumber`
    def node(self, kind: str, start: int, children=(), **payload) -> AstNode:
        end = self.pos - 1
        while end > start and self.toks[end].kind in LAYOUT:
            end -= 1
        n = AstNode(id=-1, kind=kind, children=list(children),
                    line_start=self.toks[start].line, line_end=self.toks[end].line,
                    tok_start=start, tok_end=self.pos, **payload)
        return n

    # grammar
    def program(self) -> AstNode:
        self.skip_newlines()
        main = self.funcdef()
        helpers = []
        self.skip_newlines()
        while self.peek() is not None:
            helpers.append(self.funcdef())
            self.skip_newlines()
        if helpers:
            main.children.extend(helpers)
            main.line_end = helpers[-1].line_end
            main.tok_end = helpers[-1].tok_end
        return main

    def funcdef(self) -> AstNode:
        start = self.pos
        self.expect("DEF", "'def'")
        name = self.expect("IDENT", "function name").lexeme
        self.expect("LPAREN", "'('")
        params = []
        if not self.at("RPAREN"):
            while True:
                p_start = self.pos
                pname = self.expect("IDENT", "parameter name").lexeme
                params.append(self.node("Param", p_start, name=pname))
                if not self.at("COMMA"):
                    break
                self.pos += 1
        self.expect("RPAREN", "')'")
        self.expect("COLON", "':'")
        body = self.block()
        return self.node("FuncDef", start, params + [body], name=name)

    def block(self) -> AstNode:
        self.expect("NEWLINE", "newline")
        self.skip_newlines()
        self.expect("INDENT", "indented block")
        start = self.pos
        stmts = []
        while not self.at("DEDENT") and self.peek() is not None:
            stmts.append(self.statement())
            self.skip_newlines()
        end = self.pos
        self.expect("DEDENT", "dedent")
        blk = AstNode(id=-1, kind="Block", children=stmts,
                      line_start=stmts[0].line_start, line_end=stmts[-1].line_end,
                      tok_start=start, tok_end=end)
        return blk

    def end_simple(self):
        if self.peek() is not None and not self.at("DEDENT"):
            self.expect("NEWLINE", "end of statement")

    def statement(self) -> AstNode:
        start = self.pos
        t = self.peek()
        if t.kind == "IF":
            self.pos += 1
            cond = self.expr()
            self.expect("COLON", "':'")
            then = self.block()
            arms = [cond, then]
            while self.at("ELIF"):
                e_start = self.pos
                self.pos += 1
                e_cond = self.expr()
                self.expect("COLON", "':'")
                e_body = self.block()
                arms.append(self.node("Elif", e_start, [e_cond, e_body]))
            if self.at("ELSE"):
                e_start = self.pos
                self.pos += 1
                self.expect("COLON", "':'")
                e_body = self.block()
                arms.append(self.node("Else", e_start, [e_body]))
            return self.node("If", start, arms)
        if t.kind == "WHILE":
            self.pos += 1
            cond = self.expr()
            self.expect("COLON", "':'")
            body = self.block()
            return self.node("While", start, [cond, body])
        if t.kind == "RETURN":
            self.pos += 1
            value = self.expr()
            n = self.node("Return", start, [value])
            self.end_simple()
            return n
        if t.kind == "IDENT" and self.peek(1) is not None and self.peek(1).kind == "EQ":
            self.pos += 2
            value = self.expr()
            n = self.node("Assign", start, [value], name=t.lexeme)
            self.end_simple()
            return n
        if t.kind == "IDENT" and self.peek(1) is not None and self.peek(1).kind == "LPAREN":
            n = self.call()
            self.end_simple()
            return n
        self.fail("expected statement")

    def expr(self, level: int = 0) -> AstNode:
        if level == len(BINARY_LEVELS):
            return self.unary()
        ops = BINARY_LEVELS[level]
        start = self.pos
        if ops is None:
            if self.at("NOT"):
                self.pos += 1
                operand = self.expr(level)
                return self.node("UnaryOp", start, [operand], op="not")
            return self.expr(level + 1)
        left = self.expr(level + 1)
        while self.peek() is not None and self.peek().lexeme in ops:
            op = self.peek().lexeme
            self.pos += 1
            right = self.expr(level + 1)
            left = self.node("BinOp", start, [left, right], op=op)
            if level == 3:
                break  # comparisons do not chain
        return left

    def unary(self) -> AstNode:
        start = self.pos
        if self.at("MINUS"):
            self.pos += 1
            operand = self.unary()
            return self.node("UnaryOp", start, [operand], op="-")
        return self.atom()

    def atom(self) -> AstNode:
        start = self.pos
        t = self.peek()
        if t is None:
            self.fail("expected expression")
        if t.kind == "INT":
            self.pos += 1
            return self.node("IntLit", start, value=int(t.lexeme))
        if t.kind in ("TRUE", "FALSE"):
            self.pos += 1
            return self.node("BoolLit", start, value=(t.kind == "TRUE"))
        if t.kind == "IDENT":
            if self.peek(1) is not None and self.peek(1).kind == "LPAREN":
                return self.call()
            self.pos += 1
            return self.node("Var", start, name=t.lexeme)
        if t.kind == "LPAREN":
            self.pos += 1
            inner = self.expr()
            self.expect("RPAREN", "')'")
            return inner
        self.fail("expected expression")

    def call(self) -> AstNode:
        start = self.pos
        name = self.expect("IDENT").lexeme
        self.expect("LPAREN", "'('")
        args = []
        if not self.at("RPAREN"):
            while True:
                args.append(self.expr())
                if not self.at("COMMA"):
                    break
                self.pos += 1
        self.expect("RPAREN", "')'")
        return self.node("Call", start, args, name=name)


def _renumber(root: AstNode) -> list[AstNode]:
    """Assign dense pre-order ids, parents and sibling order."""
    ordered: list[AstNode] = []
    stack = [(root, None, 0)]
    while stack:
        node, parent, order = stack.pop()
        node.id = len(ordered)
        node.parent = parent
        node.order = order
        ordered.append(node)
        kids = node.children
        for i in range(len(kids) - 1, -1, -1):
            stack.append((kids[i], node.id, i))
    for node in ordered:
        node.children = [c.id for c in node.children]
    return ordered


def parse(tokens: list[Token]) -> Tree:
    """Parse a token stream into a Tree rooted at the main FuncDef.

    Helper functions become trailing children of the main FuncDef so the
    whole file is one tree.
    """
    if not tokens:
        raise ParseError("expected 'def', found end of input", 1, 1)
    p = _Parser(tokens)
    root = p.program()
    return Tree(_renumber(root), tokens)


def parse_program(text: str, name: str = "program") -> tuple[Tree, SourceProgram]:
    tree = parse(tokenize(text))
    return tree, SourceProgram.from_text(name, text)


def parse_test(text: str) -> TestCase:
    """Parse a single ``check name(args) == expected`` line."""
    toks = [t for t in tokenize(text.strip("\n")) if t.kind not in ("NEWLINE",)]
    if any(t.kind in ("INDENT", "DEDENT") for t in toks):
        raise ParseError("check must not be indented", toks[0].line if toks else 1, 1)
    p = _Parser(toks)
    p.expect("CHECK", "'check'")
    name = p.expect("IDENT", "function name").lexeme
    p.expect("LPAREN", "'('")
    args = []
    if not p.at("RPAREN"):
        while True:
            args.append(_read_literal(p))
            if not p.at("COMMA"):
                break
            p.pos += 1
    p.expect("RPAREN", "')'")
    p.expect("EQEQ", "'=='")
    expected = _read_literal(p)
    if p.peek() is not None:
        p.fail("expected end of check")
    return TestCase(name, tuple(args), expected)


def _read_literal(p: _Parser) -> Value:
    if p.at("TRUE", "FALSE"):
        t = p.peek()
        p.pos += 1
        return t.kind == "TRUE"
    neg = False
    if p.at("MINUS"):
        p.pos += 1
        neg = True
    v = int(p.expect("INT", "literal").lexeme)
    return -v if neg else v


# ---------------------------------------------------------------------------
# pretty printer


def _expr_prec(n: AstNode) -> int:
    if n.kind == "BinOp":
        return PRECEDENCE[n.op]
    if n.kind == "UnaryOp":
        return PRECEDENCE["not"] if n.op == "not" else UNARY_MINUS_PREC
    return ATOM_PREC


def _expr(tree: Tree, n: AstNode) -> str:
    k = n.kind
    if k == "IntLit":
        return str(n.value)
    if k == "BoolLit":
        return format_value(n.value)
    if k == "Var":
        return n.name
    if k == "Call":
        return f"{n.name}({', '.join(_expr(tree, c) for c in tree.child_nodes(n))})"
    if k == "UnaryOp":
        operand = tree[n.children[0]]
        inner = _expr(tree, operand)
        if _expr_prec(operand) < _expr_prec(n):
            inner = f"({inner})"
        return f"not {inner}" if n.op == "not" else f"-{inner}"
    if k == "BinOp":
        left, right = tree.child_nodes(n)
        prec = PRECEDENCE[n.op]
        ls, rs = _expr(tree, left), _expr(tree, right)
        lp, rp = _expr_prec(left), _expr_prec(right)
        # comparisons are non-associative; others are left-associative
        if lp < prec or (prec == 4 and lp == 4):
            ls = f"({ls})"
        if rp <= prec:
            rs = f"({rs})"
        return f"{ls} {n.op} {rs}"
    raise ValueError(f"not an expression: {k}")


def _stmt_lines(tree: Tree, n: AstNode, indent: int) -> list[str]:
    pad = "  " * indent
    k = n.kind
    if k == "FuncDef":
        params = ", ".join(p.name for p in tree.params(n))
        out = [f"{pad}def {n.name}({params}):"]
        out += _stmt_lines(tree, tree.body(n), indent + 1)
        for helper in (c for c in tree.child_nodes(n) if c.kind == "FuncDef"):
            out += _stmt_lines(tree, helper, indent)
        return out
    if k == "Block":
        out = []
        for c in tree.child_nodes(n):
            out += _stmt_lines(tree, c, indent)
        return out
    if k == "Assign":
        return [f"{pad}{n.name} = {_expr(tree, tree[n.children[0]])}"]
    if k == "Return":
        return [f"{pad}return {_expr(tree, tree[n.children[0]])}"]
    if k == "While":
        cond, body = tree.child_nodes(n)
        return [f"{pad}while {_expr(tree, cond)}:"] + _stmt_lines(tree, body, indent + 1)
    if k in ("If", "Elif"):
        kids = tree.child_nodes(n)
        out = [f"{pad}{k.lower()} {_expr(tree, kids[0])}:"] + _stmt_lines(tree, kids[1], indent + 1)
        for arm in kids[2:]:
            out += _stmt_lines(tree, arm, indent)
        return out
    if k == "Else":
        return [f"{pad}else:"] + _stmt_lines(tree, tree[n.children[0]], indent + 1)
    if k == "Param":
        return [f"{pad}{n.name}"]
    return [pad + _expr(tree, n)]


def pretty_print(tree: Tree, node_id: int = 0) -> str:
    """Render the subtree at ``node_id`` in canonical two-space form.

    Any node may be printed; a statement outside its function prints as a
    bare fragment at indentation zero.
    """
    return "\n".join(_stmt_lines(tree, tree[node_id], 0)) + "\n"
