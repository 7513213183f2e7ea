//! Holds the `acceptance` integration test. It lives in its own package so
//! that a workspace test run reaches it after every other suite.
