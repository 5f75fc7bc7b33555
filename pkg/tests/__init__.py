# Tests for Personal Cash Flow Simulator & Reporter
