"""kerbtrip: dual-variant Kerberos-style protocol engine.

Implements a classic six-message ticket exchange (baseline) alongside a
hardened variant in which clients register three passwords: the first
protects the AS reply, the second seals the service session key issued by
the TGS, and the third is a challenge secret the application server verifies
under a timer, escalating unanswered or failed challenges back to the AS.

Subpackages/modules: :mod:`kerbtrip.crypto` (keys, sealing, keytabs),
:mod:`kerbtrip.protocol` (messages and wire codec), :mod:`kerbtrip.principals`
(state machines), :mod:`kerbtrip.netsim` (deterministic adversarial
simulator), :mod:`kerbtrip.transport` (socket daemons), :mod:`kerbtrip.cli`.
"""

__version__ = "0.1.0"
