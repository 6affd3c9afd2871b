/*
   Copyright 2026 The stodyn Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

// Scalar expression language used for drift, noise intensity and
// slow-fast nonlinearities in scenario files.
//
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := '-' unary | power
//   power   := atom ('^' unary)?          right-associative
//   atom    := number | ident | func '(' expr ')' | '(' expr ')'
//
// State variables are positional (x1..xn, y1..ym, t). Every other
// identifier is a named parameter.

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stodyn/error.hpp"

namespace stodyn::expr {

using Bindings = std::map<std::string, double, std::less<>>;

class ParseError : public Error {
public:
    ParseError(std::size_t offset, std::vector<std::string> expected, const std::string& detail)
        : Error(format(offset, expected, detail)), offset_(offset), expected_(std::move(expected)) {}

    std::size_t offset() const noexcept { return offset_; }
    const std::vector<std::string>& expected() const noexcept { return expected_; }

private:
    static std::string format(std::size_t offset, const std::vector<std::string>& expected,
                              const std::string& detail) {
        std::string msg = "syntax error at offset " + std::to_string(offset) + ": " + detail;
        if (!expected.empty()) {
            msg += " (expected one of:";
            for (const auto& e : expected) msg += " " + e;
            msg += ")";
        }
        return msg;
    }

    std::size_t offset_;
    std::vector<std::string> expected_;
};

class EvalError : public Error {
public:
    enum class Kind { unbound_variable, division_by_zero, domain };

    EvalError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

enum class Op : std::uint8_t { add, sub, mul, div, pow, neg, sin, cos, exp, tanh, abs, sqrt };

namespace detail {

inline constexpr std::array<std::pair<std::string_view, Op>, 6> kFunctions{{
    {"sin", Op::sin}, {"cos", Op::cos}, {"exp", Op::exp},
    {"tanh", Op::tanh}, {"abs", Op::abs}, {"sqrt", Op::sqrt},
}};

inline std::optional<Op> function_op(std::string_view name) {
    for (const auto& [n, op] : kFunctions)
        if (n == name) return op;
    return std::nullopt;
}

inline std::string_view op_name(Op op) {
    switch (op) {
        case Op::add: return "+";
        case Op::sub: return "-";
        case Op::mul: return "*";
        case Op::div: return "/";
        case Op::pow: return "^";
        case Op::neg: return "-";
        default: break;
    }
    for (const auto& [n, o] : kFunctions)
        if (o == op) return n;
    return "?";
}

inline double divide(double a, double b) {
    if (b == 0.0) throw EvalError(EvalError::Kind::division_by_zero, "division by zero");
    return a / b;
}

inline double power(double a, double b) {
    if (a < 0.0 && std::isfinite(b) && b != std::trunc(b))
        throw EvalError(EvalError::Kind::domain, "negative base raised to a non-integer power");
    if (a == 0.0 && b < 0.0)
        throw EvalError(EvalError::Kind::division_by_zero, "zero raised to a negative power");
    return std::pow(a, b);
}

inline double apply_unary(Op op, double v) {
    switch (op) {
        case Op::neg: return -v;
        case Op::sin: return std::sin(v);
        case Op::cos: return std::cos(v);
        case Op::exp: return std::exp(v);
        case Op::tanh: return std::tanh(v);
        case Op::abs: return std::abs(v);
        case Op::sqrt:
            if (v < 0.0) throw EvalError(EvalError::Kind::domain, "sqrt of negative value");
            return std::sqrt(v);
        default: break;
    }
    return v;
}

inline double apply_binary(Op op, double a, double b) {
    switch (op) {
        case Op::add: return a + b;
        case Op::sub: return a - b;
        case Op::mul: return a * b;
        case Op::div: return divide(a, b);
        case Op::pow: return power(a, b);
        default: break;
    }
    return 0.0;
}

inline std::string format_number(double v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

}  // namespace detail

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
    enum class Kind : std::uint8_t { number, variable, unary, binary };

    Kind kind = Kind::number;
    Op op = Op::add;
    double value = 0.0;
    std::string name;
    NodePtr lhs;
    NodePtr rhs;
};

/// True for the positional names x1.., y1.. and t.
inline bool is_state_variable(std::string_view name) {
    if (name == "t") return true;
    if (name.size() < 2 || (name[0] != 'x' && name[0] != 'y')) return false;
    if (name[1] == '0') return false;
    return std::all_of(name.begin() + 1, name.end(), [](char c) { return c >= '0' && c <= '9'; });
}

/// Immutable parse tree. Copies share nodes.
class Expr {
public:
    Expr() = default;
    explicit Expr(NodePtr root, std::string source = {}) : root_(std::move(root)), source_(std::move(source)) {
        if (root_) collect(*root_);
    }

    const NodePtr& root() const noexcept { return root_; }
    const std::string& source() const noexcept { return source_; }

    /// Every identifier referenced by the expression.
    const std::set<std::string, std::less<>>& free_variables() const noexcept { return free_; }

    /// Free identifiers that are not positional state variables.
    std::set<std::string, std::less<>> parameters() const {
        std::set<std::string, std::less<>> out;
        for (const auto& v : free_)
            if (!is_state_variable(v)) out.insert(v);
        return out;
    }

    bool is_constant() const noexcept { return free_.empty(); }

    double eval(const Bindings& bindings) const {
        if (!root_) throw EvalError(EvalError::Kind::unbound_variable, "empty expression");
        return eval_node(*root_, bindings);
    }

    /// Fully parenthesised rendering; parse(to_string()) evaluates identically.
    std::string to_string() const { return root_ ? render(*root_) : std::string{}; }

private:
    void collect(const Node& n) {
        if (n.kind == Node::Kind::variable) free_.insert(n.name);
        if (n.lhs) collect(*n.lhs);
        if (n.rhs) collect(*n.rhs);
    }

    static double eval_node(const Node& n, const Bindings& b) {
        switch (n.kind) {
            case Node::Kind::number: return n.value;
            case Node::Kind::variable: {
                auto it = b.find(n.name);
                if (it == b.end())
                    throw EvalError(EvalError::Kind::unbound_variable, "unbound variable '" + n.name + "'");
                return it->second;
            }
            case Node::Kind::unary: return detail::apply_unary(n.op, eval_node(*n.lhs, b));
            case Node::Kind::binary:
                return detail::apply_binary(n.op, eval_node(*n.lhs, b), eval_node(*n.rhs, b));
        }
        return 0.0;
    }

    static std::string render(const Node& n) {
        switch (n.kind) {
            case Node::Kind::number: return detail::format_number(n.value);
            case Node::Kind::variable: return n.name;
            case Node::Kind::unary:
                if (n.op == Op::neg) return "(-" + render(*n.lhs) + ")";
                return std::string(detail::op_name(n.op)) + "(" + render(*n.lhs) + ")";
            case Node::Kind::binary:
                return "(" + render(*n.lhs) + " " + std::string(detail::op_name(n.op)) + " " +
                       render(*n.rhs) + ")";
        }
        return {};
    }

    NodePtr root_;
    std::string source_;
    std::set<std::string, std::less<>> free_;
};

namespace detail {

class Parser {
public:
    explicit Parser(std::string_view src) : src_(src) {}

    Expr run() {
        skip_ws();
        NodePtr root = parse_sum();
        skip_ws();
        if (pos_ != src_.size())
            fail({"operator", "end of input"}, "unexpected '" + std::string(1, src_[pos_]) + "'");
        return Expr(std::move(root), std::string(src_));
    }

private:
    [[noreturn]] void fail(std::vector<std::string> expected, const std::string& detail) const {
        throw ParseError(pos_, std::move(expected), detail);
    }

    void skip_ws() {
        while (pos_ < src_.size() && (src_[pos_] == ' ' || src_[pos_] == '\t' || src_[pos_] == '\n' ||
                                      src_[pos_] == '\r'))
            ++pos_;
    }

    bool accept(char c) {
        skip_ws();
        if (pos_ < src_.size() && src_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    static NodePtr make_binary(Op op, NodePtr l, NodePtr r) {
        auto n = std::make_shared<Node>();
        n->kind = Node::Kind::binary;
        n->op = op;
        n->lhs = std::move(l);
        n->rhs = std::move(r);
        return n;
    }

    static NodePtr make_unary(Op op, NodePtr c) {
        auto n = std::make_shared<Node>();
        n->kind = Node::Kind::unary;
        n->op = op;
        n->lhs = std::move(c);
        return n;
    }

    NodePtr parse_sum() {
        NodePtr lhs = parse_product();
        for (;;) {
            if (accept('+')) lhs = make_binary(Op::add, lhs, parse_product());
            else if (accept('-')) lhs = make_binary(Op::sub, lhs, parse_product());
            else return lhs;
        }
    }

    NodePtr parse_product() {
        NodePtr lhs = parse_unary();
        for (;;) {
            if (accept('*')) lhs = make_binary(Op::mul, lhs, parse_unary());
            else if (accept('/')) lhs = make_binary(Op::div, lhs, parse_unary());
            else return lhs;
        }
    }

    NodePtr parse_unary() {
        if (accept('-')) return make_unary(Op::neg, parse_unary());
        return parse_power();
    }

    NodePtr parse_power() {
        NodePtr base = parse_atom();
        if (accept('^')) return make_binary(Op::pow, base, parse_unary());
        return base;
    }

    NodePtr parse_atom() {
        skip_ws();
        static const std::vector<std::string> kOperand{"number", "identifier", "'('", "'-'"};
        if (pos_ >= src_.size()) fail(kOperand, "unexpected end of input");
        const char c = src_[pos_];
        if ((c >= '0' && c <= '9') || c == '.') return parse_number();
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return parse_identifier();
        if (c == '(') {
            ++pos_;
            NodePtr inner = parse_sum();
            if (!accept(')')) fail({"')'"}, "unbalanced parenthesis");
            return inner;
        }
        fail(kOperand, "unexpected '" + std::string(1, c) + "'");
    }

    NodePtr parse_number() {
        const std::size_t start = pos_;
        while (pos_ < src_.size() && ((src_[pos_] >= '0' && src_[pos_] <= '9') || src_[pos_] == '.')) ++pos_;
        if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
            std::size_t p = pos_ + 1;
            if (p < src_.size() && (src_[p] == '+' || src_[p] == '-')) ++p;
            if (p < src_.size() && src_[p] >= '0' && src_[p] <= '9') {
                pos_ = p;
                while (pos_ < src_.size() && src_[pos_] >= '0' && src_[pos_] <= '9') ++pos_;
            }
        }
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(src_.data() + start, src_.data() + pos_, v);
        if (ec != std::errc() || ptr != src_.data() + pos_) {
            pos_ = start;
            fail({"number"}, "malformed number");
        }
        auto n = std::make_shared<Node>();
        n->kind = Node::Kind::number;
        n->value = v;
        return n;
    }

    NodePtr parse_identifier() {
        const std::size_t start = pos_;
        while (pos_ < src_.size() &&
               (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
            ++pos_;
        std::string name(src_.substr(start, pos_ - start));
        if (auto fn = function_op(name)) {
            if (!accept('(')) fail({"'('"}, "function '" + name + "' requires an argument list");
            NodePtr arg = parse_sum();
            if (!accept(')')) fail({"')'"}, "unbalanced parenthesis");
            return make_unary(*fn, std::move(arg));
        }
        auto n = std::make_shared<Node>();
        n->kind = Node::Kind::variable;
        n->name = std::move(name);
        return n;
    }

    std::string_view src_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline Expr parse(std::string_view source) { return detail::Parser(source).run(); }

/// Expression compiled to postfix code over a fixed slot layout. Parameters
/// are folded in as constants at compile time. Immutable; safe to share
/// across threads.
class Program {
public:
    Program() = default;

    /// `slots` names the positional inputs in call order; every other free
    /// variable must be bound in `constants`.
    Program(const Expr& e, std::span<const std::string> slots, const Bindings& constants = {}) {
        if (!e.root()) throw ValidationError("", "cannot compile an empty expression");
        emit(*e.root(), slots, constants);
        std::size_t depth = 0;
        for (const auto& ins : code_) {
            depth += ins.kind == Kind::push_const || ins.kind == Kind::push_slot ? 1 : 0;
            depth -= ins.kind == Kind::binary ? 1 : 0;
            max_depth_ = std::max(max_depth_, depth);
        }
        if (max_depth_ > kMaxStack)
            throw ValidationError("", "expression nesting too deep: " + e.source());
        source_ = e.source();
    }

    double operator()(std::span<const double> slots) const {
        std::array<double, kMaxStack> stack;
        std::size_t sp = 0;
        for (const auto& ins : code_) {
            switch (ins.kind) {
                case Kind::push_const: stack[sp++] = ins.value; break;
                case Kind::push_slot: stack[sp++] = slots[ins.slot]; break;
                case Kind::unary: stack[sp - 1] = detail::apply_unary(ins.op, stack[sp - 1]); break;
                case Kind::binary:
                    --sp;
                    stack[sp - 1] = detail::apply_binary(ins.op, stack[sp - 1], stack[sp]);
                    break;
            }
        }
        return stack[0];
    }

    bool is_constant() const noexcept { return code_.size() == 1 && code_[0].kind == Kind::push_const; }
    const std::string& source() const noexcept { return source_; }

private:
    static constexpr std::size_t kMaxStack = 64;
    enum class Kind : std::uint8_t { push_const, push_slot, unary, binary };
    struct Instruction {
        Kind kind;
        Op op;
        std::uint32_t slot;
        double value;
    };

    // Returns true when the subtree folded to a single constant.
    bool emit(const Node& n, std::span<const std::string> slots, const Bindings& constants) {
        switch (n.kind) {
            case Node::Kind::number:
                code_.push_back({Kind::push_const, Op::add, 0, n.value});
                return true;
            case Node::Kind::variable: {
                for (std::size_t i = 0; i < slots.size(); ++i) {
                    if (slots[i] == n.name) {
                        code_.push_back({Kind::push_slot, Op::add, static_cast<std::uint32_t>(i), 0.0});
                        return false;
                    }
                }
                auto it = constants.find(n.name);
                if (it == constants.end())
                    throw EvalError(EvalError::Kind::unbound_variable, "unbound variable '" + n.name + "'");
                code_.push_back({Kind::push_const, Op::add, 0, it->second});
                return true;
            }
            case Node::Kind::unary: {
                const bool folded = emit(*n.lhs, slots, constants);
                if (folded) {
                    code_.back().value = detail::apply_unary(n.op, code_.back().value);
                    return true;
                }
                code_.push_back({Kind::unary, n.op, 0, 0.0});
                return false;
            }
            case Node::Kind::binary: {
                const bool lf = emit(*n.lhs, slots, constants);
                const bool rf = emit(*n.rhs, slots, constants);
                if (lf && rf) {
                    const double r = code_.back().value;
                    code_.pop_back();
                    code_.back().value = detail::apply_binary(n.op, code_.back().value, r);
                    return true;
                }
                code_.push_back({Kind::binary, n.op, 0, 0.0});
                return false;
            }
        }
        return false;
    }

    std::vector<Instruction> code_;
    std::size_t max_depth_ = 0;
    std::string source_;
};

}  // namespace stodyn::expr
