fn main() {
    println!("xms placeholder");
}
