#pragma once

#include "csd/fields.hpp"
#include "csd/jet.hpp"
#include "csd/rational.hpp"

#include <map>
#include <memory>
#include <string>
#include <variant>

namespace csd {

// ---------------------------------------------------------------------------
// AST
// ---------------------------------------------------------------------------

enum class FuncKind { Exp, Log, Sin, Cos, Sinh, Cosh, Sqrt };
enum class BinOp { Add, Sub, Mul, Div, Pow };

struct ExprNode;
using ExprPtr = std::shared_ptr<const ExprNode>;

struct ExprNode {
    struct RatConst { Rational v; };
    struct DecConst { double v; std::string text; };
    struct Var { int index; }; // 0-based; prints as x{index+1}
    struct Param { std::string name; };
    struct Neg { ExprPtr child; };
    struct Func { FuncKind kind; ExprPtr child; };
    struct Bin { BinOp op; ExprPtr lhs, rhs; };

    std::variant<RatConst, DecConst, Var, Param, Neg, Func, Bin> node;
};

/// Parsed expression over coordinates x1..xn with optional named parameters.
class ExprAst {
public:
    ExprAst() = default;
    ExprAst(ExprPtr root, int nvars) : root_(std::move(root)), n_(nvars) {}
    const ExprPtr& root() const { return root_; }
    int nvars() const { return n_; }
    bool valid() const { return root_ != nullptr; }

private:
    ExprPtr root_;
    int n_ = 0;
};

using Bindings = std::map<std::string, double>;

// ---------------------------------------------------------------------------
// parser: standard precedence (^ > unary minus > * / > + -), parentheses,
// function application f(e); whitespace-insensitive; errors carry byte offsets
// ---------------------------------------------------------------------------

namespace detail {

inline const char* func_name(FuncKind k) {
    switch (k) {
    case FuncKind::Exp: return "exp";
    case FuncKind::Log: return "log";
    case FuncKind::Sin: return "sin";
    case FuncKind::Cos: return "cos";
    case FuncKind::Sinh: return "sinh";
    case FuncKind::Cosh: return "cosh";
    default: return "sqrt";
    }
}

class ExprParser {
public:
    ExprParser(const std::string& src, int nvars) : src_(src), n_(nvars) {}

    ExprPtr parse() {
        ExprPtr e = sum();
        skip_ws();
        if (pos_ != src_.size())
            throw ParseError("unexpected trailing input", pos_, "end of expression");
        return e;
    }

private:
    ExprPtr sum() {
        ExprPtr lhs = term();
        for (;;) {
            skip_ws();
            if (accept('+')) lhs = fold(BinOp::Add, lhs, term());
            else if (accept('-')) lhs = fold(BinOp::Sub, lhs, term());
            else return lhs;
        }
    }

    ExprPtr term() {
        ExprPtr lhs = unary();
        for (;;) {
            skip_ws();
            if (accept('*')) lhs = fold(BinOp::Mul, lhs, unary());
            else if (accept('/')) lhs = fold(BinOp::Div, lhs, unary());
            else return lhs;
        }
    }

    ExprPtr unary() {
        skip_ws();
        if (accept('-')) return fold_neg(unary());
        return power();
    }

    ExprPtr power() {
        ExprPtr base = primary();
        skip_ws();
        if (accept('^')) {
            // right-associative; exponent may carry a sign
            ExprPtr e = unary();
            return fold(BinOp::Pow, base, e);
        }
        return base;
    }

    ExprPtr primary() {
        skip_ws();
        if (pos_ >= src_.size())
            throw ParseError("unexpected end of expression", pos_, "number, variable or '('");
        char ch = src_[pos_];
        if (ch == '(') {
            ++pos_;
            ExprPtr e = sum();
            skip_ws();
            if (!accept(')')) throw ParseError("missing ')'", pos_, ")");
            return e;
        }
        if (std::isdigit(static_cast<unsigned char>(ch)) || ch == '.') return number();
        if (std::isalpha(static_cast<unsigned char>(ch)) || ch == '_') return identifier();
        throw ParseError(std::string("unexpected character '") + ch + "'", pos_,
                         "number, variable or '('");
    }

    ExprPtr number() {
        size_t start = pos_;
        bool is_dec = false;
        while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
        if (pos_ < src_.size() && src_[pos_] == '.') {
            is_dec = true;
            ++pos_;
            while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
        }
        if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
            is_dec = true;
            ++pos_;
            if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) ++pos_;
            size_t digs = pos_;
            while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
            if (pos_ == digs) throw ParseError("malformed exponent", pos_, "digits");
        }
        std::string text = src_.substr(start, pos_ - start);
        if (start == pos_) throw ParseError("malformed number", start, "digits");
        auto node = std::make_shared<ExprNode>();
        if (is_dec) node->node = ExprNode::DecConst{std::stod(text), text};
        else node->node = ExprNode::RatConst{Rational(std::stoll(text))};
        return node;
    }

    ExprPtr identifier() {
        size_t start = pos_;
        while (pos_ < src_.size() &&
               (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
            ++pos_;
        std::string name = src_.substr(start, pos_ - start);
        skip_ws();
        bool call = pos_ < src_.size() && src_[pos_] == '(';
        if (call) {
            FuncKind kind;
            if (name == "exp") kind = FuncKind::Exp;
            else if (name == "log") kind = FuncKind::Log;
            else if (name == "sin") kind = FuncKind::Sin;
            else if (name == "cos") kind = FuncKind::Cos;
            else if (name == "sinh") kind = FuncKind::Sinh;
            else if (name == "cosh") kind = FuncKind::Cosh;
            else if (name == "sqrt") kind = FuncKind::Sqrt;
            else
                throw ParseError("unknown function '" + name + "'", start,
                                 "exp, log, sin, cos, sinh, cosh, sqrt");
            ++pos_; // consume '('
            ExprPtr arg = sum();
            skip_ws();
            if (!accept(')')) throw ParseError("missing ')' after function argument", pos_, ")");
            auto node = std::make_shared<ExprNode>();
            node->node = ExprNode::Func{kind, arg};
            return node;
        }
        if (name.size() >= 2 && name[0] == 'x' &&
            name.find_first_not_of("0123456789", 1) == std::string::npos) {
            int idx = std::stoi(name.substr(1));
            if (idx < 1 || idx > n_)
                throw ParseError("variable " + name + " out of range for dimension " +
                                     std::to_string(n_),
                                 start, "x1..x" + std::to_string(n_));
            auto node = std::make_shared<ExprNode>();
            node->node = ExprNode::Var{idx - 1};
            return node;
        }
        auto node = std::make_shared<ExprNode>();
        node->node = ExprNode::Param{name};
        return node;
    }

    // exact constant folding on rational subtrees; keeps "3/2" a single value
    static ExprPtr fold(BinOp op, const ExprPtr& a, const ExprPtr& b) {
        const auto* ra = std::get_if<ExprNode::RatConst>(&a->node);
        const auto* rb = std::get_if<ExprNode::RatConst>(&b->node);
        if (ra && rb) {
            bool ok = true;
            Rational v;
            switch (op) {
            case BinOp::Add: v = ra->v + rb->v; break;
            case BinOp::Sub: v = ra->v - rb->v; break;
            case BinOp::Mul: v = ra->v * rb->v; break;
            case BinOp::Div:
                if (rb->v.is_zero()) ok = false;
                else v = ra->v / rb->v;
                break;
            case BinOp::Pow:
                if (rb->v.is_integer() && std::abs(rb->v.num()) <= 16) v = ra->v.pow(rb->v.num());
                else ok = false;
                break;
            }
            if (ok) {
                auto node = std::make_shared<ExprNode>();
                node->node = ExprNode::RatConst{v};
                return node;
            }
        }
        auto node = std::make_shared<ExprNode>();
        node->node = ExprNode::Bin{op, a, b};
        return node;
    }

    static ExprPtr fold_neg(const ExprPtr& a) {
        if (const auto* ra = std::get_if<ExprNode::RatConst>(&a->node)) {
            auto node = std::make_shared<ExprNode>();
            node->node = ExprNode::RatConst{-ra->v};
            return node;
        }
        auto node = std::make_shared<ExprNode>();
        node->node = ExprNode::Neg{a};
        return node;
    }

    void skip_ws() {
        while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    }
    bool accept(char c) {
        if (pos_ < src_.size() && src_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    const std::string& src_;
    int n_;
    size_t pos_ = 0;
};

} // namespace detail

inline ExprAst parse(const std::string& src, int nvars) {
    detail::ExprParser p(src, nvars);
    return ExprAst(p.parse(), nvars);
}

// ---------------------------------------------------------------------------
// pretty printer (minimal parentheses; parse ∘ print ∘ parse is the identity)
// ---------------------------------------------------------------------------

namespace detail {

inline int precedence_of(const ExprNode& e) {
    if (std::holds_alternative<ExprNode::Bin>(e.node)) {
        switch (std::get<ExprNode::Bin>(e.node).op) {
        case BinOp::Add:
        case BinOp::Sub: return 1;
        case BinOp::Mul:
        case BinOp::Div: return 2;
        case BinOp::Pow: return 4;
        }
    }
    if (std::holds_alternative<ExprNode::Neg>(e.node)) return 3;
    if (const auto* r = std::get_if<ExprNode::RatConst>(&e.node)) {
        if (!r->v.is_integer()) return 2; // prints as p/q
        if (r->v.num() < 0) return 3;     // prints with leading minus
    }
    if (const auto* d = std::get_if<ExprNode::DecConst>(&e.node))
        if (d->v < 0) return 3;
    return 9;
}

inline void print_node(std::string& out, const ExprNode& e, int parent_prec, bool rhs_of_same) {
    int prec = precedence_of(e);
    bool parens = prec < parent_prec || (prec == parent_prec && rhs_of_same);
    if (parens) out += '(';
    if (const auto* r = std::get_if<ExprNode::RatConst>(&e.node)) {
        out += r->v.str();
    } else if (const auto* d = std::get_if<ExprNode::DecConst>(&e.node)) {
        out += d->text;
    } else if (const auto* v = std::get_if<ExprNode::Var>(&e.node)) {
        out += "x" + std::to_string(v->index + 1);
    } else if (const auto* p = std::get_if<ExprNode::Param>(&e.node)) {
        out += p->name;
    } else if (const auto* ng = std::get_if<ExprNode::Neg>(&e.node)) {
        out += '-';
        print_node(out, *ng->child, 3, true);
    } else if (const auto* f = std::get_if<ExprNode::Func>(&e.node)) {
        out += func_name(f->kind);
        out += '(';
        print_node(out, *f->child, 0, false);
        out += ')';
    } else {
        const auto& b = std::get<ExprNode::Bin>(e.node);
        const char* op = b.op == BinOp::Add   ? " + "
                         : b.op == BinOp::Sub ? " - "
                         : b.op == BinOp::Mul ? "*"
                         : b.op == BinOp::Div ? "/"
                                              : "^";
        print_node(out, *b.lhs, prec, b.op == BinOp::Pow);
        out += op;
        print_node(out, *b.rhs, prec, b.op != BinOp::Pow);
    }
    if (parens) out += ')';
}

} // namespace detail

inline std::string pretty_print(const ExprAst& ast) {
    std::string out;
    detail::print_node(out, *ast.root(), 0, false);
    return out;
}

// ---------------------------------------------------------------------------
// jet evaluation
// ---------------------------------------------------------------------------

namespace detail {

inline Jet eval_node(const ExprNode& e, const Bindings& bindings, const Vec& x, int order) {
    int n = static_cast<int>(x.size());
    if (const auto* r = std::get_if<ExprNode::RatConst>(&e.node))
        return Jet::constant(n, order, x, r->v.to_double());
    if (const auto* d = std::get_if<ExprNode::DecConst>(&e.node))
        return Jet::constant(n, order, x, d->v);
    if (const auto* v = std::get_if<ExprNode::Var>(&e.node))
        return Jet::coordinate(n, order, x, v->index);
    if (const auto* p = std::get_if<ExprNode::Param>(&e.node)) {
        auto it = bindings.find(p->name);
        if (it == bindings.end()) throw UnboundParameterError(p->name);
        return Jet::constant(n, order, x, it->second);
    }
    if (const auto* ng = std::get_if<ExprNode::Neg>(&e.node))
        return -eval_node(*ng->child, bindings, x, order);
    if (const auto* f = std::get_if<ExprNode::Func>(&e.node)) {
        Jet u = eval_node(*f->child, bindings, x, order);
        switch (f->kind) {
        case FuncKind::Exp: return exp(u);
        case FuncKind::Log: return log(u);
        case FuncKind::Sin: return sin(u);
        case FuncKind::Cos: return cos(u);
        case FuncKind::Sinh: return sinh(u);
        case FuncKind::Cosh: return cosh(u);
        default: return sqrt(u);
        }
    }
    const auto& b = std::get<ExprNode::Bin>(e.node);
    if (b.op == BinOp::Pow) {
        // exponents must be rational literals so weights stay exact
        ExprPtr rhs = b.rhs;
        bool negate = false;
        if (const auto* inner = std::get_if<ExprNode::Neg>(&rhs->node)) {
            negate = true;
            rhs = inner->child;
        }
        const auto* r = std::get_if<ExprNode::RatConst>(&rhs->node);
        if (!r) throw DomainError("exponent must be a rational constant");
        Rational q = negate ? -r->v : r->v;
        return pow(eval_node(*b.lhs, bindings, x, order), q);
    }
    Jet l = eval_node(*b.lhs, bindings, x, order);
    Jet r = eval_node(*b.rhs, bindings, x, order);
    switch (b.op) {
    case BinOp::Add: return l + r;
    case BinOp::Sub: return l - r;
    case BinOp::Mul: return l * r;
    default:
        if (r.value() == 0.0) throw DomainError("division by zero at evaluation point");
        return l / r;
    }
}

} // namespace detail

inline Jet eval_expr_jet(const ExprAst& ast, const Bindings& bindings, const Vec& x, int order) {
    if (static_cast<int>(x.size()) != ast.nvars())
        throw DimensionError("evaluation point dimension mismatch");
    Jet j = detail::eval_node(*ast.root(), bindings, x, order);
    if (!j.finite())
        throw EvalError("non-finite coefficient while evaluating expression", j.first_nonfinite());
    return j;
}

inline ScalarField expr_field(const ExprAst& ast, Bindings bindings = {}) {
    return {ast.nvars(), [ast, bindings = std::move(bindings)](const Vec& x, int k) {
                return eval_expr_jet(ast, bindings, x, k);
            }};
}

inline ScalarField expr_field(const std::string& src, int nvars, Bindings bindings = {}) {
    return expr_field(parse(src, nvars), std::move(bindings));
}

} // namespace csd
