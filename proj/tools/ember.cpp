// ember: command-line front end for the peer daemon.
//
// `peer start` runs the daemon in the foreground. Every other command talks to
// a running daemon over the local control API.
//
// Exit codes: 0 ok, 1 other failure, 2 usage, 3 daemon unreachable,
// 4 authentication, 5 not found, 6 invalid input, 7 delivery failure or
// timeout, 8 busy. Failures print "error: <category>: <detail>" on stderr.

#include "ember/daemon.hpp"
#include "ember/error.hpp"
#include "ember/log.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

using namespace ember;
using control::json;

namespace {

namespace fs = std::filesystem;

int exitCodeFor(Errc code) {
    switch (code) {
    case Errc::refused:
    case Errc::closed: return 3;
    case Errc::auth_failure: return 4;
    case Errc::not_found: return 5;
    case Errc::validation:
    case Errc::precondition:
    case Errc::duplicate:
    case Errc::parse_error: return 6;
    case Errc::delivery_failure:
    case Errc::timeout: return 7;
    case Errc::busy: return 8;
    default: return 1;
    }
}

struct ClientOptions {
    std::string identityDir;
    std::string controlAddress = "127.0.0.1";
    int controlPort = -1;
    std::string token;
    bool jsonOutput = false;
};

struct StartOptions {
    std::string name;
    std::string listenAddress;
    int listenPort = -1;
    std::string advertise;
    std::string webRoot;
    std::string sweepInterval;
    std::string defaultTtl;
    std::string passphraseEnv;
    bool verbose = false;
};

fs::path defaultIdentityDir() {
    if (auto v = control::processEnv("EMBER_IDENTITY_DIR")) return *v;
    if (const char* home = std::getenv("HOME")) return fs::path(home) / ".ember";
    return ".ember";
}

std::uint16_t resolveControlPort(const ClientOptions& o) {
    if (o.controlPort > 0) return static_cast<std::uint16_t>(o.controlPort);
    if (auto v = control::processEnv("EMBER_CONTROL_PORT"); v && !v->empty()) {
        return static_cast<std::uint16_t>(std::stoi(*v));
    }
    std::ifstream in(fs::path(o.identityDir) / control::kControlPortFile);
    int port = 0;
    if (in >> port && port > 0 && port < 65536) return static_cast<std::uint16_t>(port);
    return control::kDefaultControlPort;
}

std::string resolveToken(const ClientOptions& o) {
    if (!o.token.empty()) return o.token;
    std::ifstream in(fs::path(o.identityDir) / control::kTokenFile);
    std::string token;
    if (!(in >> token)) throw Error(Errc::refused, "no control token in " + o.identityDir + "; is a daemon set up there?");
    return token;
}

std::unique_ptr<control::ControlClient> connectClient(const ClientOptions& o) {
    return control::ControlClient::connect(o.controlAddress, resolveControlPort(o), resolveToken(o));
}

void emit(const ClientOptions& o, const json& result, const std::function<void(const json&)>& human) {
    if (o.jsonOutput) {
        std::cout << result.dump(2) << "\n";
    } else {
        human(result);
    }
}

control::Config buildConfig(const ClientOptions& client, const StartOptions& s) {
    control::Config cfg;
    cfg.identityDir = client.identityDir;
    control::applyEnvironment(cfg);
    cfg.identityDir = client.identityDir;
    if (!s.name.empty()) cfg.displayName = s.name;
    if (!s.listenAddress.empty()) cfg.listenAddress = s.listenAddress;
    if (s.listenPort >= 0) cfg.listenPort = static_cast<std::uint16_t>(s.listenPort);
    if (!s.advertise.empty()) cfg.advertiseAddress = s.advertise;
    if (!s.webRoot.empty()) cfg.webRoot = s.webRoot;
    if (!s.sweepInterval.empty()) cfg.sweepIntervalMs = control::parseDuration(s.sweepInterval);
    if (!s.defaultTtl.empty()) cfg.defaultTtlMs = control::parseDuration(s.defaultTtl);
    if (client.controlPort >= 0) cfg.controlPort = static_cast<std::uint16_t>(client.controlPort);
    cfg.controlAddress = client.controlAddress;
    if (!s.passphraseEnv.empty()) {
        auto v = control::processEnv(s.passphraseEnv);
        if (!v) throw Error(Errc::validation, "environment variable " + s.passphraseEnv + " is not set");
        cfg.passphrase = *v;
    }
    return cfg;
}

int runDaemon(const control::Config& cfg, bool verbose) {
    if (verbose) log::setLevel(log::Level::debug);
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    auto daemon = Daemon::start(cfg);
    std::cout << "listening " << daemon->localEndpoint().display() << " control " << cfg.controlAddress << ":"
              << daemon->controlPort() << std::endl;
    timespec slice{0, 250'000'000};
    while (!daemon->stopRequested()) {
        if (sigtimedwait(&set, nullptr, &slice) > 0) daemon->requestStop();
    }
    daemon->stop();
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ember: end-to-end encrypted peer messaging"};
    app.require_subcommand(1);
    // Let the global options appear after the subcommand too.
    app.fallthrough();

    ClientOptions client;
    client.identityDir = defaultIdentityDir().string();
    app.add_option("--identity", client.identityDir, "Identity directory holding keys, token and store");
    app.add_option("--control-address", client.controlAddress, "Control API address");
    app.add_option("--control-port", client.controlPort, "Control API port");
    app.add_option("--token", client.token, "Control API token (default: read from the identity directory)");
    app.add_flag("--json", client.jsonOutput, "Print raw JSON results");

    StartOptions start;
    auto* peer = app.add_subcommand("peer", "Daemon lifecycle");
    peer->require_subcommand(1);
    auto* peerStart = peer->add_subcommand("start", "Run the daemon in the foreground");
    peerStart->add_option("--name", start.name, "Display name sent with every message");
    peerStart->add_option("--listen-address", start.listenAddress, "Peer listener bind address");
    peerStart->add_option("--listen-port", start.listenPort, "Peer listener port, 0 picks a free one");
    peerStart->add_option("--advertise", start.advertise, "Address peers use to reach this daemon");
    peerStart->add_option("--web-root", start.webRoot, "Directory of web client files to serve");
    peerStart->add_option("--sweep-interval", start.sweepInterval, "TTL sweep interval, e.g. 60s");
    peerStart->add_option("--default-ttl", start.defaultTtl, "Default message TTL, e.g. 5m");
    peerStart->add_option("--passphrase-env", start.passphraseEnv,
                          "Derive the store key from the passphrase in this environment variable");
    peerStart->add_flag("-v,--verbose", start.verbose, "Debug logging");
    auto* peerStop = peer->add_subcommand("stop", "Ask the running daemon to shut down");
    auto* peerStatus = peer->add_subcommand("status", "Show listener state and ports");

    auto* contact = app.add_subcommand("contact", "Contacts and key verification");
    contact->require_subcommand(1);
    std::string contactName, contactAddr, contactKey, conversation;
    int contactPort = 0;
    auto* contactAdd = contact->add_subcommand("add", "Add a contact with an out-of-band key");
    contactAdd->add_option("--name", contactName, "Contact display name")->required();
    contactAdd->add_option("--addr", contactAddr, "Contact address (IPv4 or IPv6 literal)")->required();
    contactAdd->add_option("--port", contactPort, "Contact listener port")->required();
    contactAdd->add_option("--key", contactKey, "Shared 32-byte key, Base64")->required();
    auto* contactList = contact->add_subcommand("list", "List contacts");
    auto* contactFingerprint = contact->add_subcommand("fingerprint", "Show the key fingerprint of a conversation");
    contactFingerprint->add_option("conversation", conversation)->required();
    auto* contactVerify = contact->add_subcommand("verify", "Mark a conversation fingerprint as verified");
    contactVerify->add_option("conversation", conversation)->required();

    auto* msg = app.add_subcommand("msg", "Messages");
    msg->require_subcommand(1);
    std::string text, ttl;
    int limit = 50;
    auto* msgSend = msg->add_subcommand("send", "Send a message");
    msgSend->add_option("conversation", conversation)->required();
    msgSend->add_option("text", text)->required();
    msgSend->add_option("--ttl", ttl, "Time to live, e.g. 60s, 5m, 1h (default: daemon setting)");
    auto* msgList = msg->add_subcommand("list", "List messages, newest first");
    msgList->add_option("conversation", conversation)->required();
    msgList->add_option("--limit", limit, "Maximum number of messages");

    auto* rotate = app.add_subcommand("rotate", "Rotate a conversation key");
    rotate->add_option("conversation", conversation)->required();
    std::string waitFor;
    rotate->add_option("--wait", waitFor, "Wait up to this long for the rotation to finish, e.g. 30s");

    auto* sweep = app.add_subcommand("sweep", "TTL sweep");
    sweep->require_subcommand(1);
    auto* sweepNow = sweep->add_subcommand("now", "Delete expired messages immediately");

    auto* keygen = app.add_subcommand("keygen", "Print a fresh random conversation key (Base64) to share out of band");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (peerStart->parsed()) return runDaemon(buildConfig(client, start), start.verbose);

        if (keygen->parsed()) {
            auto key = crypto::generateKey();
            std::cout << base64Encode(key.bytes()) << "\n";
            return 0;
        }

        auto api = connectClient(client);

        if (peerStop->parsed()) {
            emit(client, api->call("shutdown"), [](const json&) { std::cout << "stopping\n"; });
        } else if (peerStatus->parsed()) {
            emit(client, api->call("getNetworkStatus"), [](const json& r) {
                std::cout << "state " << r.value("state", "") << "\n"
                          << "endpoint " << r.value("endpoint", "") << "\n"
                          << "listen-port " << r.value("listenPort", 0) << "\n"
                          << "control-port " << r.value("controlPort", 0) << "\n";
            });
        } else if (contactAdd->parsed()) {
            json params = {{"displayName", contactName}, {"address", contactAddr}, {"port", contactPort}, {"key", contactKey}};
            emit(client, api->call("addContact", params), [](const json& r) {
                std::cout << "conversation " << r.value("conversationId", "") << "\n"
                          << "fingerprint " << r.value("fingerprint", "") << "\n";
            });
        } else if (contactList->parsed()) {
            emit(client, api->call("listContacts"), [](const json& r) {
                for (const auto& c : r.at("contacts")) {
                    std::cout << c.value("conversationId", "") << "  " << c.value("displayName", "") << "  "
                              << c.value("endpoint", "") << "  v" << c.value("keyVersion", 0) << "  "
                              << c.value("trust", "") << "\n";
                }
            });
        } else if (contactFingerprint->parsed()) {
            emit(client, api->call("getFingerprint", {{"conversationId", conversation}}), [](const json& r) {
                std::cout << r.value("fingerprint", "") << "  v" << r.value("keyVersion", 0) << "  "
                          << r.at("trust").value("status", "") << "\n";
            });
        } else if (contactVerify->parsed()) {
            emit(client, api->call("setVerified", {{"conversationId", conversation}}),
                 [](const json& r) { std::cout << r.at("trust").value("status", "") << "\n"; });
        } else if (msgSend->parsed()) {
            json params = {{"conversationId", conversation}, {"text", text}};
            if (!ttl.empty()) params["ttl"] = control::parseDuration(ttl);
            auto r = api->call("sendMessage", params);
            emit(client, r, [](const json& res) { std::cout << res.value("id", "") << "\n"; });
            if (r.value("deliveryStatus", "") == "FAILED") {
                std::cerr << "error: delivery_failure: " << r.value("failure", "unknown") << "\n";
                return exitCodeFor(Errc::delivery_failure);
            }
        } else if (msgList->parsed()) {
            emit(client, api->call("listMessages", {{"conversationId", conversation}, {"limit", limit}}),
                 [](const json& r) {
                     for (const auto& m : r.at("messages")) {
                         const auto& p = m.at("plaintext");
                         std::cout << m.value("timestamp", std::int64_t{0}) << "  " << m.value("direction", "")
                                   << "  " << m.value("senderName", "") << "  "
                                   << (p.is_string() ? p.get<std::string>() : "<" + m.value("error", "") + ">")
                                   << "\n";
                     }
                 });
        } else if (rotate->parsed()) {
            json r;
            try {
                r = api->call("startRotation", {{"conversationId", conversation}});
            } catch (const Error& e) {
                // The request never reached the peer; the daemon already reset the rotation.
                if (e.code() != Errc::delivery_failure) throw;
                throw Error(Errc::timeout, std::string("peer did not answer, key unchanged (") + e.what() + ")");
            }
            if (!waitFor.empty()) {
                const auto deadline = std::chrono::steady_clock::now() +
                                      std::chrono::milliseconds(control::parseDuration(waitFor));
                std::string outcome;
                while (outcome.empty() && std::chrono::steady_clock::now() < deadline) {
                    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
                    auto ev = api->nextEvent(std::max<std::int64_t>(1, left.count()));
                    if (!ev || ev->value("event", "") != "ROTATION_STATE") continue;
                    const auto& data = ev->at("data");
                    if (data.value("conversationId", "") != conversation) continue;
                    const std::string state = data.value("state", "");
                    if (state == "COMPLETED" || state == "ABORTED" || state == "TIMEOUT") outcome = state;
                }
                r = api->call("getRotationState", {{"conversationId", conversation}});
                if (outcome.empty()) outcome = "TIMEOUT";
                r["outcome"] = outcome;
                emit(client, r, [](const json& res) {
                    std::cout << res.value("outcome", "") << "  v" << res.value("keyVersion", 0) << "\n";
                });
                if (outcome == "ABORTED") {
                    std::cerr << "error: auth_failure: rotation aborted\n";
                    return exitCodeFor(Errc::auth_failure);
                }
                if (outcome == "TIMEOUT") {
                    std::cerr << "error: timeout: rotation did not complete\n";
                    return exitCodeFor(Errc::timeout);
                }
            } else {
                emit(client, r, [](const json& res) {
                    std::cout << res.value("phase", "") << "  proposed v" << res.value("proposedVersion", 0) << "\n";
                });
            }
        } else if (sweepNow->parsed()) {
            emit(client, api->call("sweepNow"),
                 [](const json& r) { std::cout << "removed " << r.value("removed", 0) << "\n"; });
        }
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << errcName(e.code()) << ": " << e.what() << "\n";
        return exitCodeFor(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: io: " << e.what() << "\n";
        return 1;
    }
}
