# racnet - Test Suite
